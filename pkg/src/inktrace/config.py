"""Flat key=value run configuration: schema, validation, canonical hash."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

from .phantom import PhantomSpec
from .segmentation import TraceParams
from .ink_model import TrainConfig


class ConfigError(Exception):
    pass


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "yes", "1"):
        return True
    if low in ("false", "no", "0"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _parse_ints(raw: str) -> tuple[int, ...]:
    return tuple(int(p) for p in raw.replace(" ", "").split(",") if p)


_REQUIRED = object()

# key -> (parser, default); _REQUIRED defaults must appear in the file
SCHEMA: dict = {
    "seed": (int, _REQUIRED),
    "phantom.kind": (str, "fragment"),
    "phantom.wraps": (int, 5),
    "phantom.spiral_pitch": (float, 120.0),
    "phantom.sheet_thickness": (float, 60.0),
    "phantom.fiber_period": (float, 28.0),
    "phantom.fiber_amplitude": (float, 0.4),
    "phantom.ink_text": (str, "NOY"),
    "phantom.ink_mode": (str, "morphology"),
    "phantom.ink_strength": (float, 0.12),
    "phantom.noise_sigma": (float, 0.02),
    "phantom.layer_count": (int, 2),
    "phantom.warp_amplitude": (float, 8.0),
    "phantom.voxel_size": (float, 4.0),
    "phantom.size_x": (int, 256),
    "phantom.size_z": (int, 256),
    "phantom.ink_depth": (float, 8.0),
    "phantom.core_boost": (float, 0.25),
    "phantom.glyph_cell_w": (int, 45),
    "phantom.glyph_cell_h": (int, 63),
    "trace.step_dz": (float, 2.0),
    "trace.search_radius": (int, 3),
    "trace.alpha": (float, 0.3),
    "trace.beta": (float, 0.1),
    "trace.relax_iters": (int, 3),
    "trace.min_intensity": (float, 0.15),
    "trace.spacing": (float, 2.0),
    "trace.z_margin": (int, 2),
    "flatten.px_per_voxel": (float, 1.0),
    "sample.depth": (int, 33),
    "sample.step": (float, 1.0),
    "label.landmark_count": (int, 9),
    "label.method": (str, "otsu"),
    "label.threshold": (float, 0.5),
    "model.patch": (_parse_ints, (9, 9, 17)),
    "model.hidden": (_parse_ints, (64, 32)),
    "train.learning_rate": (float, 0.01),
    "train.batch_size": (int, 64),
    "train.total_batches": (int, 12000),
    "train.eval_every": (int, 200),
    "train.stride": (int, 1),
    "train.balance": (_parse_bool, True),
    "predict.stride": (int, 2),
    "regions.count": (int, 4),
    "eval.threshold": (float, 0.5),
}


@dataclass(frozen=True)
class PipelineConfig:
    """Validated flat configuration for one pipeline run."""

    values: dict

    def __getitem__(self, key: str):
        return self.values[key]

    @property
    def seed(self) -> int:
        return self.values["seed"]

    def phantom_spec(self) -> PhantomSpec:
        v = self.values
        return PhantomSpec(
            kind=v["phantom.kind"], wraps=v["phantom.wraps"],
            spiral_pitch=v["phantom.spiral_pitch"],
            sheet_thickness=v["phantom.sheet_thickness"],
            fiber_period=v["phantom.fiber_period"],
            fiber_amplitude=v["phantom.fiber_amplitude"],
            ink_text=v["phantom.ink_text"], ink_mode=v["phantom.ink_mode"],
            ink_strength=v["phantom.ink_strength"],
            noise_sigma=v["phantom.noise_sigma"],
            layer_count=v["phantom.layer_count"],
            warp_amplitude=v["phantom.warp_amplitude"],
            voxel_size=v["phantom.voxel_size"], seed=v["seed"],
            size_x=v["phantom.size_x"], size_z=v["phantom.size_z"],
            ink_depth=v["phantom.ink_depth"],
            core_boost=v["phantom.core_boost"],
            glyph_cell_w=v["phantom.glyph_cell_w"],
            glyph_cell_h=v["phantom.glyph_cell_h"])

    def trace_params(self) -> TraceParams:
        v = self.values
        return TraceParams(step_dz=v["trace.step_dz"],
                           search_radius=v["trace.search_radius"],
                           alpha=v["trace.alpha"], beta=v["trace.beta"],
                           relax_iters=v["trace.relax_iters"],
                           min_intensity=v["trace.min_intensity"])

    def train_config(self, seed: int) -> TrainConfig:
        v = self.values
        return TrainConfig(learning_rate=v["train.learning_rate"],
                           batch_size=v["train.batch_size"],
                           total_batches=v["train.total_batches"],
                           seed=seed, balance=v["train.balance"],
                           eval_every=v["train.eval_every"])


def parse_config(text: str) -> PipelineConfig:
    """Parse and validate flat ``key=value`` lines ('#' comments allowed)."""
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {lineno}: expected key=value, got "
                              f"{body!r}")
        key, _, val = body.partition("=")
        key = key.strip()
        if key in raw:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        raw[key] = val.strip()

    unknown = sorted(set(raw) - set(SCHEMA))
    if unknown:
        raise ConfigError(f"unknown config key: {unknown[0]}")

    values: dict = {}
    for key, (parser, default) in SCHEMA.items():
        if key in raw:
            try:
                values[key] = parser(raw[key])
            except ValueError as err:
                raise ConfigError(f"bad value for {key}: {err}") from err
        elif default is _REQUIRED:
            raise ConfigError(f"missing required config key: {key}")
        else:
            values[key] = default
    return PipelineConfig(values=values)


def load_config(path) -> PipelineConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text())


def _fmt_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def canonical_text(cfg: PipelineConfig) -> str:
    """Normalized serialization; logically equal configs match byte-wise."""
    return "\n".join(f"{k}={_fmt_value(cfg.values[k])}"
                     for k in sorted(cfg.values)) + "\n"


def config_hash(cfg: PipelineConfig) -> str:
    return hashlib.sha256(canonical_text(cfg).encode()).hexdigest()


def default_config_text(**overrides) -> str:
    """A complete config with defaults (seed=0) plus overrides, for docs
    and tests."""
    lines = []
    for key, (_, default) in SCHEMA.items():
        value = overrides.get(key, 0 if default is _REQUIRED else default)
        lines.append(f"{key}={_fmt_value(value)}")
    extra = set(overrides) - set(SCHEMA)
    if extra:
        raise ConfigError(f"unknown config key: {sorted(extra)[0]}")
    return "\n".join(lines) + "\n"
