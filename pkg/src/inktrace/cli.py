"""Deterministic, resumable command-line pipeline.

Each run lives under ``<out-root>/<config-hash[:12]>/``.  Stages consume
artifacts written by earlier stages, record content hashes of their
inputs and outputs in ``manifest.json``, and are skipped on rerun when
every hash still matches — so an interrupted run resumes where it
stopped and a finished run is a no-op.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__
from .config import (ConfigError, PipelineConfig, canonical_text,
                     config_hash, load_config)
from .ink_model import (PredictionImage, Region, count_in_rect, load_params,
                        load_prediction, make_folds, predict_image,
                        read_loss_trace, save_params, save_prediction,
                        train, training_index, write_loss_trace)
from .labeling import (binarize, estimate_affine, load_labels,
                       save_labels, save_landmarks, warp_photo)
from .manifest import RunManifest, hash_paths, stage_up_to_date
from .mesh import load_obj, save_obj
from .phantom import write_phantom_dir
from .report import save_loss_curves, save_metric_bars, save_surface_panel
from .segmentation import seed_chain, trace_surface
from .unwrap import (TextureImage, composite, distortion_metrics,
                     flatten_mesh, load_surface_volume, load_texture,
                     sample_surface_volume, save_surface_volume,
                     save_texture, texture_image)
from .volume import load_slice_stack
from . import evaluation as ev


class StageError(Exception):
    pass


@dataclass
class RunContext:
    cfg: PipelineConfig
    run_dir: Path
    threads: int = 1
    verbose: bool = False
    manifest: RunManifest = field(default=None)

    def path(self, rel: str) -> Path:
        return self.run_dir / rel

    def say(self, message: str) -> None:
        if self.verbose:
            print(message)


# --- stage bodies -------------------------------------------------------------

def _stage_phantom(ctx: RunContext) -> dict:
    spec = ctx.cfg.phantom_spec()
    write_phantom_dir(spec, ctx.path("phantom"))
    return {"kind": spec.kind, "layers": spec.layer_count}


def _read_seeds(path: Path) -> tuple[float, np.ndarray]:
    z = None
    pts = []
    for raw in path.read_text().splitlines():
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            parts = line[1:].split()
            if parts and parts[0] == "z":
                z = float(parts[1])
            continue
        x, y = line.split()
        pts.append((float(x), float(y)))
    if z is None or not pts:
        raise StageError(f"{path}: expected a '# z <slice>' header and "
                         "seed rows")
    return z, np.array(pts)


def _stage_segment(ctx: RunContext) -> dict:
    grid = load_slice_stack(ctx.path("phantom/volume"))
    z0, seeds = _read_seeds(ctx.path("phantom/seeds.txt"))
    chain = seed_chain(grid, z0, seeds, spacing=ctx.cfg["trace.spacing"])
    z1 = grid.dims[2] - 1 - ctx.cfg["trace.z_margin"]
    mesh = trace_surface(grid, chain, z1, ctx.cfg.trace_params())
    ctx.path("trace").mkdir(exist_ok=True)
    save_obj(mesh, ctx.path("trace/mesh.obj"))
    return {"rows": mesh.rows, "cols": mesh.cols}


def _stage_flatten(ctx: RunContext) -> dict:
    mesh = load_obj(ctx.path("trace/mesh.obj"))
    fmesh = flatten_mesh(mesh)
    ctx.path("flatten").mkdir(exist_ok=True)
    save_obj(fmesh.mesh, ctx.path("flatten/flat.obj"))
    stats = {"area_ratio_mean": float(fmesh.area_ratio.mean()),
             "area_ratio_max": float(fmesh.area_ratio.max()),
             "angle_dev_max": float(fmesh.angle_dev.max())}
    ctx.path("flatten/stats.json").write_text(
        json.dumps(stats, indent=2, sort_keys=True) + "\n")
    return stats


def _stage_sample(ctx: RunContext) -> dict:
    grid = load_slice_stack(ctx.path("phantom/volume"))
    fmesh = distortion_metrics(load_obj(ctx.path("flatten/flat.obj")))
    sv = sample_surface_volume(grid, fmesh, depth=ctx.cfg["sample.depth"],
                               step=ctx.cfg["sample.step"],
                               px_per_voxel=ctx.cfg["flatten.px_per_voxel"],
                               threads=ctx.threads)
    save_surface_volume(sv, ctx.path("surface"))
    h, w = sv.data.shape[:2]
    return {"width": w, "height": h, "depth": sv.depth}


def _spread_vertex_ids(rows: int, cols: int, count: int) -> list[int]:
    """Roughly square landmark grid, inset from the mesh border."""
    gc = int(np.ceil(np.sqrt(count)))
    gr = int(np.ceil(count / gc))
    ri = np.round(np.linspace(0.1 * (rows - 1), 0.9 * (rows - 1),
                              gr)).astype(int)
    ci = np.round(np.linspace(0.1 * (cols - 1), 0.9 * (cols - 1),
                              gc)).astype(int)
    ids = [int(r * cols + c) for r in ri for c in ci]
    return ids[:count]


def _stage_label(ctx: RunContext) -> dict:
    sv = load_surface_volume(ctx.path("surface"))
    photo = np.asarray(Image.open(ctx.path("phantom/ground_truth/photo.tif")),
                       dtype=np.uint16).astype(np.float64) / 65535.0
    applied = np.array(
        ctx.path("phantom/ground_truth/transform.txt").read_text().split(),
        dtype=np.float64).reshape(2, 3)
    mesh = load_obj(ctx.path("flatten/flat.obj"))

    count = ctx.cfg["label.landmark_count"]
    if count < 3:
        raise StageError("label.landmark_count must be >= 3")
    ids = _spread_vertex_ids(mesh.rows, mesh.cols, count)
    world = mesh.vertices[ids][:, [0, 2]]           # (x, z) seen by the photo
    photo_pts = (world - applied[:, 2]) @ np.linalg.inv(applied[:, :2]).T
    raster_pts = (mesh.uv[ids] - sv.uv_origin) * sv.px_per_voxel

    ctx.path("labels").mkdir(exist_ok=True)
    save_landmarks(ctx.path("labels/landmarks.txt"), photo_pts, raster_pts)
    t = estimate_affine(photo_pts, raster_pts)
    h, w = sv.data.shape[:2]
    aligned, region = warp_photo(photo, t, (h, w))
    method = ctx.cfg["label.method"]
    label = binarize(aligned, region, method=method,
                     threshold=ctx.cfg["label.threshold"]
                     if method == "fixed" else None)
    save_labels(label, ctx.path("labels"))
    Image.fromarray(np.rint(np.clip(aligned, 0, 1) * 65535)
                    .astype(np.uint16)).save(ctx.path("labels/aligned.tif"))
    return {"threshold": float(label.provenance["threshold"]),
            "ink_px": int(label.ink.sum())}


def _build_regions(ctx: RunContext) -> list[Region]:
    sv = load_surface_volume(ctx.path("surface"))
    labels = load_labels(ctx.path("labels"))
    h, w = sv.data.shape[:2]
    count = ctx.cfg["regions.count"]
    if count < 2:
        raise StageError("regions.count must be >= 2 for cross-validation")
    edges = np.round(np.linspace(0, w, count + 1)).astype(int)
    return [Region(id=f"strip{k}", sv=sv, labels=labels,
                   rect=(int(edges[k]), 0, int(edges[k + 1]), h))
            for k in range(count)]


def _fold_seed(seed: int, fold: int) -> int:
    return int(np.random.SeedSequence((seed, fold)).generate_state(1)[0])


def _stage_train(ctx: RunContext) -> dict:
    regions = _build_regions(ctx)
    folds = make_folds(regions)
    patch = ctx.cfg["model.patch"]
    hidden = ctx.cfg["model.hidden"]
    ctx.path("model").mkdir(exist_ok=True)
    metrics: dict = {"folds": folds.k}
    checked = 0
    for k, (train_regions, holdout) in enumerate(folds.folds):
        for r in train_regions:
            centers, _ = training_index(r, ctx.cfg["train.stride"])
            checked += len(centers)
            assert count_in_rect(centers, holdout.rect) == 0, \
                f"training centers of {r.id} leak into {holdout.id}"
        tc = ctx.cfg.train_config(_fold_seed(ctx.cfg.seed, k))
        params, trace = train(list(train_regions), tc, patch=patch,
                              hidden=hidden, stride=ctx.cfg["train.stride"],
                              holdout=holdout)
        save_params(params, ctx.path(f"model/fold{k}.params"))
        write_loss_trace(ctx.path(f"model/fold{k}_trace.csv"), trace)
        metrics[f"fold{k}_final_loss"] = trace[-1]["loss"]
        ctx.say(f"  fold {k}: final loss {trace[-1]['loss']:.4f}")
    metrics["hygiene_checked"] = checked
    return metrics


def _stage_predict(ctx: RunContext) -> dict:
    regions = _build_regions(ctx)
    folds = make_folds(regions)
    stride = ctx.cfg["predict.stride"]
    merged_prob = None
    merged_mask = None
    for k, (_, holdout) in enumerate(folds.folds):
        params = load_params(ctx.path(f"model/fold{k}.params"))
        pred = predict_image(params, holdout, stride=stride,
                             threads=ctx.threads)
        save_prediction(pred, ctx.path(f"predict/fold{k}"))
        if merged_prob is None:
            merged_prob = pred.prob.copy()
            merged_mask = pred.mask.copy()
        else:
            merged_prob += pred.prob
            merged_mask |= pred.mask
    save_prediction(PredictionImage(prob=merged_prob, mask=merged_mask),
                    ctx.path("predict/merged"))
    return {"folds": folds.k, "stride": stride}


def _stage_composite(ctx: RunContext) -> dict:
    sv = load_surface_volume(ctx.path("surface"))
    tex = texture_image(sv)
    ctx.path("composite").mkdir(exist_ok=True)
    save_texture(tex, ctx.path("composite/texture.tif"),
                 ctx.path("composite/texture_meta.json"))
    merged = load_prediction(ctx.path("predict/merged"))
    comp = composite(tex.image, merged.prob)
    save_texture(TextureImage(image=comp, valid=tex.valid,
                              window=(0.0, 1.0)),
                 ctx.path("composite/composite.tif"),
                 ctx.path("composite/composite_meta.json"))
    return {}


def _stage_eval(ctx: RunContext) -> dict:
    labels = load_labels(ctx.path("labels"))
    regions = _build_regions(ctx)
    folds = make_folds(regions)
    threshold = ctx.cfg["eval.threshold"]
    rows = []
    pairs = []
    for k in range(folds.k):
        pred = load_prediction(ctx.path(f"predict/fold{k}"))
        pairs.append((pred, labels))
        rows.append(ev.metrics_row(
            f"fold{k}", ev.pixel_metrics(pred, labels, threshold)))
    pooled = ev.compile_cross_validation(pairs, threshold)
    rows.append(ev.metrics_row("pooled", pooled))

    ctx.path("eval").mkdir(exist_ok=True)
    ev.write_csv(ctx.path("eval/metrics.csv"), ev.METRICS_HEADER, rows)
    summary = {"threshold": threshold, "pooled_dice": pooled.dice,
               "pooled_bce": pooled.bce, "pooled_recall": pooled.recall,
               "pooled_fpr": pooled.fpr, "pixels": pooled.n}
    ctx.path("eval/summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n")

    traces = {f"fold{k}": read_loss_trace(ctx.path(f"model/fold{k}_trace.csv"))
              for k in range(folds.k)}
    save_loss_curves(traces, ctx.path("eval/loss_curves.png"))
    texture = load_texture(ctx.path("composite/texture.tif"))
    comp = load_texture(ctx.path("composite/composite.tif"))
    merged = load_prediction(ctx.path("predict/merged"))
    save_surface_panel(
        [("texture", texture), ("ink probability", merged.prob),
         ("labels", labels.ink.astype(float)), ("composite", comp)],
        ctx.path("eval/panel.png"))
    save_metric_bars(rows, ctx.path("eval/metric_bars.png"))

    print(ev.format_metrics_table(rows))
    return {k: v for k, v in summary.items() if v is not None}


# --- orchestration ------------------------------------------------------------

# name -> (body, input paths, output paths); paths relative to the run dir
STAGES: dict = {
    "phantom": (_stage_phantom, ["config.txt"], ["phantom"]),
    "segment": (_stage_segment,
                ["config.txt", "phantom/volume", "phantom/seeds.txt"],
                ["trace"]),
    "flatten": (_stage_flatten, ["config.txt", "trace/mesh.obj"],
                ["flatten"]),
    "sample": (_stage_sample,
               ["config.txt", "phantom/volume", "flatten/flat.obj"],
               ["surface"]),
    "label": (_stage_label,
              ["config.txt", "surface", "phantom/ground_truth/photo.tif",
               "phantom/ground_truth/transform.txt", "flatten/flat.obj"],
              ["labels"]),
    "train": (_stage_train, ["config.txt", "surface", "labels"], ["model"]),
    "predict": (_stage_predict,
                ["config.txt", "surface", "labels", "model"], ["predict"]),
    "composite": (_stage_composite,
                  ["config.txt", "surface", "predict/merged"], ["composite"]),
    "eval": (_stage_eval,
             ["config.txt", "surface", "labels", "model", "predict",
              "composite"], ["eval"]),
}
STAGE_ORDER = list(STAGES)
LABELED_STAGES = ("label", "train", "predict", "composite", "eval")


def _execute_stage(ctx: RunContext, name: str) -> None:
    body, inputs, outputs = STAGES[name]
    try:
        in_hashes = hash_paths(ctx.run_dir, [ctx.path(p) for p in inputs])
    except FileNotFoundError as err:
        raise StageError(f"{name}: missing input {err}; run the earlier "
                         "stages first") from None
    if stage_up_to_date(ctx.manifest, name, in_hashes, ctx.run_dir):
        print(f"[{name}] up to date")
        return
    t0 = time.perf_counter()
    metrics = body(ctx) or {}
    seconds = time.perf_counter() - t0
    out_hashes = hash_paths(ctx.run_dir, [ctx.path(p) for p in outputs])
    ctx.manifest.stages[name] = {"inputs": in_hashes, "outputs": out_hashes,
                                 "seconds": round(seconds, 3),
                                 "metrics": metrics}
    ctx.manifest.save(ctx.run_dir / "manifest.json")
    print(f"[{name}] done in {seconds:.1f}s "
          f"({len(out_hashes)} files)")


def _prepare_run(cfg: PipelineConfig, out_root: Path, threads: int,
                 verbose: bool) -> RunContext:
    digest = config_hash(cfg)
    run_dir = out_root / digest[:12]
    run_dir.mkdir(parents=True, exist_ok=True)
    text = canonical_text(cfg)
    cfg_path = run_dir / "config.txt"
    if not (cfg_path.exists() and cfg_path.read_text() == text):
        cfg_path.write_text(text)
    man_path = run_dir / "manifest.json"
    if man_path.exists():
        manifest = RunManifest.load(man_path)
        if manifest.config_hash != digest:
            raise StageError(f"run dir {run_dir} belongs to config "
                             f"{manifest.config_hash[:12]}")
    else:
        manifest = RunManifest(version=__version__, config_hash=digest)
    manifest.files = {"config.txt": next(iter(hash_paths(
        run_dir, [cfg_path]).values()))}
    return RunContext(cfg=cfg, run_dir=run_dir, threads=threads,
                      verbose=verbose, manifest=manifest)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="inktrace",
        description="Virtual unwrapping and ink detection on CT phantoms.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in [*STAGE_ORDER, "pipeline"]:
        p = sub.add_parser(name, help=f"run the {name} stage"
                           if name != "pipeline" else "run every stage")
        p.add_argument("--config", required=True, help="flat key=value file")
        p.add_argument("--out", default=None,
                       help="output root (default $INKTRACE_OUT or ./runs)")
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        needs_photo = args.command == "pipeline" \
            or args.command in LABELED_STAGES
        if needs_photo and cfg["phantom.kind"] != "fragment":
            raise ConfigError(
                f"{args.command} needs a surface photo to label; "
                "scroll phantoms have none (phantom.kind=fragment)")
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2

    out_root = Path(args.out or os.environ.get("INKTRACE_OUT", "runs"))
    stage = "setup"
    try:
        ctx = _prepare_run(cfg, out_root, args.threads, args.verbose)
        print(f"run dir: {ctx.run_dir}")
        names = STAGE_ORDER if args.command == "pipeline" else [args.command]
        for stage in names:
            _execute_stage(ctx, stage)
    except StageError as err:
        print(f"error in stage {stage}: {err}", file=sys.stderr)
        return 3
    except Exception as err:  # stage diagnostics propagate with context
        print(f"error in stage {stage}: {type(err).__name__}: {err}",
              file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
