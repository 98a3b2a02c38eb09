"""Per-voxel ink classification from surface-volume patches.

A small fully-connected network maps a (w, h, d) patch of the surface
volume to the probability that ink is present at the patch's central
pixel.  Training uses minibatch SGD with momentum on balanced batches;
evaluation regions are held out by rectangle under leave-one-out folds,
and the sampler proves the holdout was never touched.
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.interpolate import RegularGridInterpolator
from PIL import Image

from .labeling import LabelImage
from .unwrap import SurfaceVolume

LEAKY_SLOPE = 0.01
MOMENTUM = 0.9
PROB_EPS = 1e-7
PARAMS_MAGIC = b"INKMLP01"


class TrainingDiverged(Exception):
    def __init__(self, message: str, trace: list):
        super().__init__(message)
        self.trace = trace


@dataclass
class Region:
    """A rectangular evaluation unit on one labeled surface.

    rect is (u0, v0, u1, v1), half-open, in raster pixels.
    """

    id: str
    sv: SurfaceVolume
    labels: LabelImage
    rect: tuple[int, int, int, int]

    def __post_init__(self):
        h, w = self.sv.data.shape[:2]
        if self.labels.ink.shape != (h, w):
            raise ValueError(f"labels {self.labels.ink.shape} do not match "
                             f"surface raster {(h, w)}")
        u0, v0, u1, v1 = self.rect
        if not (0 <= u0 < u1 <= w and 0 <= v0 < v1 <= h):
            raise ValueError(f"rect {self.rect} outside raster {(w, h)}")


@dataclass
class FoldPlan:
    """Leave-one-out folds: (train_regions, holdout_region) per fold."""

    folds: list[tuple[tuple[Region, ...], Region]]

    @property
    def k(self) -> int:
        return len(self.folds)


def rects_overlap(a, b) -> bool:
    return a[0] < b[2] and b[0] < a[2] and a[1] < b[3] and b[1] < a[3]


def make_folds(regions: list[Region]) -> FoldPlan:
    if len(regions) < 2:
        raise ValueError(f"need >= 2 regions for cross-validation, "
                         f"got {len(regions)}")
    ids = [r.id for r in regions]
    if len(set(ids)) != len(ids):
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        raise ValueError(f"duplicate region ids: {dupes}")
    for i, a in enumerate(regions):
        for b in regions[i + 1:]:
            if a.sv is b.sv and rects_overlap(a.rect, b.rect):
                raise ValueError(f"regions {a.id} and {b.id} overlap")
    folds = []
    for i, holdout in enumerate(regions):
        train = tuple(r for j, r in enumerate(regions) if j != i)
        folds.append((train, holdout))
    return FoldPlan(folds=folds)


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    batch_size: int = 32
    total_batches: int = 4000
    seed: int = 0
    balance: bool = True
    eval_every: int = 200

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.balance and self.batch_size % 2:
            raise ValueError("balanced batches need an even batch_size")
        if self.total_batches < 1:
            raise ValueError("total_batches must be >= 1")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")


@dataclass
class ModelParams:
    """Weights of the patch classifier; arrays are float64 in memory."""

    layer_sizes: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    input_shape: tuple[int, int, int]   # (w, h, d)
    normalization: bool = True

    @property
    def n_in(self) -> int:
        w, h, d = self.input_shape
        return w * h * d


def init_params(input_shape: tuple[int, int, int], hidden=(64, 32),
                seed: int = 0, normalization: bool = True) -> ModelParams:
    """Seeded uniform init, |w| <= sqrt(6 / (fan_in + fan_out)), zero bias."""
    w, h, d = input_shape
    sizes = [w * h * d, *hidden, 1]
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        a = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-a, a, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return ModelParams(layer_sizes=sizes, weights=weights, biases=biases,
                       input_shape=tuple(input_shape),
                       normalization=normalization)


def _leaky(z: np.ndarray) -> np.ndarray:
    return np.where(z > 0, z, LEAKY_SLOPE * z)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _forward_batch(params: ModelParams,
                   x: np.ndarray) -> tuple[np.ndarray, list]:
    """Returns sigmoid outputs (B,) and the activation cache."""
    acts = [x]
    zs = []
    a = x
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = a @ w + b
        zs.append(z)
        a = _leaky(z) if i < last else z
        acts.append(a)
    p = _sigmoid(acts[-1][:, 0])
    return p, [acts, zs]


def _backward_batch(params: ModelParams, cache: list, p: np.ndarray,
                    y: np.ndarray) -> tuple[list, list]:
    """Gradients of mean BCE w.r.t. weights and biases."""
    acts, zs = cache
    batch = len(y)
    dz = ((p - y) / batch)[:, None]
    grad_w = [None] * len(params.weights)
    grad_b = [None] * len(params.biases)
    for i in range(len(params.weights) - 1, -1, -1):
        grad_w[i] = acts[i].T @ dz
        grad_b[i] = dz.sum(axis=0)
        if i:
            da = dz @ params.weights[i].T
            dz = da * np.where(zs[i - 1] > 0, 1.0, LEAKY_SLOPE)
    return grad_w, grad_b


def bce_loss(p: np.ndarray, y: np.ndarray) -> float:
    """Mean binary cross-entropy with probabilities clamped away from 0/1."""
    pc = np.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    return float(-(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc)).mean())


def forward(params: ModelParams, patch: np.ndarray) -> float:
    """Probability of ink at the central pixel of one patch."""
    patch = np.asarray(patch, dtype=np.float64)
    w, h, d = params.input_shape
    if patch.shape not in ((h, w, d), (params.n_in,)):
        raise ValueError(f"patch shape {patch.shape} does not match "
                         f"input {(h, w, d)}")
    if np.isnan(patch).any():
        raise ValueError("patch contains NaN")
    p, _ = _forward_batch(params, patch.reshape(1, -1))
    return float(p[0])


def normalize_patches(x: np.ndarray) -> np.ndarray:
    """Per-patch zero mean, unit variance; flat-patch guard leaves zeros."""
    mu = x.mean(axis=1, keepdims=True)
    sd = x.std(axis=1, keepdims=True)
    return (x - mu) / np.where(sd > 1e-12, sd, 1.0)


def _padded_windows(sv: SurfaceVolume, patch: tuple[int, int, int]):
    pw, ph, pd = patch
    if pd > sv.depth:
        raise ValueError(f"patch depth {pd} exceeds surface volume depth "
                         f"{sv.depth}")
    hh, hw = ph // 2, pw // 2
    padded = np.pad(sv.data, ((hh, hh), (hw, hw), (0, 0)))
    win = sliding_window_view(padded, (ph, pw, pd), axis=(0, 1, 2))
    k0 = (sv.depth - pd) // 2
    return win, k0


def training_index(region: Region, stride: int = 1
                   ) -> tuple[np.ndarray, np.ndarray]:
    """Labeled centers inside the region rect, row-major at ``stride``.

    Pixels outside the labeled region or without a valid central sample
    are skipped.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    u0, v0, u1, v1 = region.rect
    us = np.arange(u0, u1, stride)
    vs = np.arange(v0, v1, stride)
    uu, vv = np.meshgrid(us, vs)
    uu = uu.ravel()
    vv = vv.ravel()
    ok = region.labels.region[vv, uu] & region.sv.pixel_valid()[vv, uu]
    centers = np.column_stack([uu[ok], vv[ok]])
    labels = region.labels.ink[centers[:, 1], centers[:, 0]]
    return centers, labels


def gather_patches(sv: SurfaceVolume, centers: np.ndarray,
                   patch: tuple[int, int, int],
                   normalize: bool) -> np.ndarray:
    """Flattened patches (n, w*h*d) around raster centers (u, v)."""
    win, k0 = _padded_windows(sv, patch)
    x = win[centers[:, 1], centers[:, 0], k0].reshape(len(centers), -1)
    x = np.ascontiguousarray(x, dtype=np.float64)
    return normalize_patches(x) if normalize else x


def extract_training_set(region: Region, patch=(9, 9, 17), stride: int = 1,
                         seed: int = 0, normalize: bool = True):
    """Yield (patch, label) pairs in a seed-determined order."""
    centers, labels = training_index(region, stride)
    if not len(centers):
        raise ValueError(f"region {region.id} has no labeled valid pixels")
    order = np.random.default_rng(seed).permutation(len(centers))
    win, k0 = _padded_windows(region.sv, patch)
    pw, ph, pd = patch
    for i in order:
        u, v = centers[i]
        x = np.ascontiguousarray(win[v, u, k0], dtype=np.float64)
        if normalize:
            x = normalize_patches(x.reshape(1, -1)).reshape(ph, pw, pd)
        yield x, bool(labels[i])


def count_in_rect(centers: np.ndarray, rect) -> int:
    u0, v0, u1, v1 = rect
    if not len(centers):
        return 0
    inside = ((centers[:, 0] >= u0) & (centers[:, 0] < u1)
              & (centers[:, 1] >= v0) & (centers[:, 1] < v1))
    return int(inside.sum())


def train(regions: list[Region], config: TrainConfig, patch=(9, 9, 17),
          hidden=(64, 32), normalize: bool = True, stride: int = 1,
          holdout: Region | None = None
          ) -> tuple[ModelParams, list[dict]]:
    """Train one classifier on every sample from ``regions``.

    When ``holdout`` is given, every candidate training center is checked
    against the holdout rect (same surface) before any batch is drawn;
    a violation raises.  The loss trace carries holdout BCE/Dice on a
    fixed subsample so convergence is visible per fold.
    """
    if not regions:
        raise ValueError("no training regions")
    per_region = []
    total_checked = 0
    for r in regions:
        centers, labels = training_index(r, stride)
        if holdout is not None and r.sv is holdout.sv:
            total_checked += len(centers)
            bad = count_in_rect(centers, holdout.rect)
            if bad:
                raise ValueError(
                    f"fold hygiene violated: {bad} training centers from "
                    f"region {r.id} fall in holdout rect {holdout.rect}")
        if len(centers):
            per_region.append((r, centers, labels))
    if not per_region:
        raise ValueError("no labeled valid pixels in the training regions")

    all_labels = np.concatenate([lab for _, _, lab in per_region])
    reg_of = np.concatenate([np.full(len(lab), i)
                             for i, (_, _, lab) in enumerate(per_region)])
    all_centers = np.concatenate([c for _, c, _ in per_region])
    pos_idx = np.flatnonzero(all_labels)
    neg_idx = np.flatnonzero(~all_labels)
    if config.balance and (not len(pos_idx) or not len(neg_idx)):
        raise ValueError("balanced batches need both classes; got "
                         f"{len(pos_idx)} ink / {len(neg_idx)} clear")

    windows = [(_padded_windows(r.sv, patch)) for r, _, _ in per_region]

    ss = np.random.SeedSequence(config.seed)
    init_ss, batch_ss, eval_ss = ss.spawn(3)
    params = init_params((patch[0], patch[1], patch[2]), hidden=hidden,
                         seed=init_ss.generate_state(1)[0],
                         normalization=normalize)
    batch_rng = np.random.default_rng(batch_ss)

    ho_x = ho_y = None
    if holdout is not None:
        ho_centers, ho_labels = training_index(holdout, stride=1)
        if len(ho_centers):
            cap = min(len(ho_centers), 4096)
            pick = np.random.default_rng(eval_ss).choice(
                len(ho_centers), size=cap, replace=False)
            ho_x = gather_patches(holdout.sv, ho_centers[pick], patch,
                                  normalize)
            ho_y = ho_labels[pick].astype(np.float64)

    def gather(idx: np.ndarray) -> np.ndarray:
        x = np.empty((len(idx), params.n_in))
        for gi, (win, k0) in enumerate(windows):
            sel = np.flatnonzero(reg_of[idx] == gi)
            if not len(sel):
                continue
            c = all_centers[idx[sel]]
            x[sel] = win[c[:, 1], c[:, 0], k0].reshape(len(sel), -1)
        return normalize_patches(x) if normalize else x

    vel_w = [np.zeros_like(w) for w in params.weights]
    vel_b = [np.zeros_like(b) for b in params.biases]
    half = config.batch_size // 2
    trace: list[dict] = []
    for step in range(1, config.total_batches + 1):
        if config.balance:
            idx = np.concatenate([
                pos_idx[batch_rng.integers(0, len(pos_idx), half)],
                neg_idx[batch_rng.integers(0, len(neg_idx), half)]])
        else:
            idx = batch_rng.integers(0, len(all_labels), config.batch_size)
        x = gather(idx)
        y = all_labels[idx].astype(np.float64)
        p, cache = _forward_batch(params, x)
        loss = bce_loss(p, y)
        if not np.isfinite(loss):
            raise TrainingDiverged(
                f"loss went non-finite at batch {step}", trace)
        gw, gb = _backward_batch(params, cache, p, y)
        for i in range(len(params.weights)):
            vel_w[i] = MOMENTUM * vel_w[i] + gw[i]
            vel_b[i] = MOMENTUM * vel_b[i] + gb[i]
            params.weights[i] -= config.learning_rate * vel_w[i]
            params.biases[i] -= config.learning_rate * vel_b[i]
        if step % config.eval_every == 0 or step == config.total_batches:
            row = {"batch": step, "loss": loss}
            if ho_x is not None:
                hp, _ = _forward_batch(params, ho_x)
                row["holdout_bce"] = bce_loss(hp, ho_y)
                hl = hp >= 0.5
                tp = float((hl & (ho_y > 0.5)).sum())
                denom = 2 * tp + float((hl & (ho_y < 0.5)).sum()) \
                    + float((~hl & (ho_y > 0.5)).sum())
                row["holdout_dice"] = 2 * tp / denom if denom else 1.0
            trace.append(row)
    return params, trace


def grad_check(params: ModelParams, patch: np.ndarray, label: float,
               num_weights: int = 100, h: float = 1e-4,
               seed: int = 0) -> float:
    """Max relative error between backprop and central differences."""
    patch = np.asarray(patch, dtype=np.float64).reshape(1, -1)
    y = np.array([float(label)])
    p, cache = _forward_batch(params, patch)
    gw, gb = _backward_batch(params, cache, p, y)
    arrays = list(params.weights) + list(params.biases)
    grads = list(gw) + list(gb)
    sizes = [a.size for a in arrays]
    total = sum(sizes)
    rng = np.random.default_rng(seed)
    coords = rng.choice(total, size=min(num_weights, total), replace=False)
    bounds = np.cumsum([0] + sizes)

    def loss_now() -> float:
        pp, _ = _forward_batch(params, patch)
        return bce_loss(pp, y)

    worst = 0.0
    for coord in coords:
        ai = int(np.searchsorted(bounds, coord, side="right") - 1)
        flat = arrays[ai].reshape(-1)
        j = int(coord - bounds[ai])
        orig = flat[j]
        flat[j] = orig + h
        lp = loss_now()
        flat[j] = orig - h
        lm = loss_now()
        flat[j] = orig
        numeric = (lp - lm) / (2.0 * h)
        analytic = grads[ai].reshape(-1)[j]
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6)
        worst = max(worst, err)
    return worst


@dataclass
class PredictionImage:
    """Ink probability over the full raster; mask marks scored pixels."""

    prob: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        if self.prob.shape != self.mask.shape:
            raise ValueError("prob and mask dims differ")


def predict_image(params: ModelParams, region: Region, stride: int = 1,
                  threads: int = 1) -> PredictionImage:
    """Score the region rect; stride > 1 fills gaps by bilinear blending.

    Lattice rows are processed independently (optionally in a thread
    pool) and written to disjoint rows, so any thread count produces the
    same image bit for bit.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    sv = region.sv
    h, w = sv.data.shape[:2]
    u0, v0, u1, v1 = region.rect
    win, k0 = _padded_windows(sv, (params.input_shape[0],
                                   params.input_shape[1],
                                   params.input_shape[2]))
    us = np.arange(u0, u1, stride)
    if us[-1] != u1 - 1:
        us = np.append(us, u1 - 1)
    vs = np.arange(v0, v1, stride)
    if vs[-1] != v1 - 1:
        vs = np.append(vs, v1 - 1)

    lattice = np.zeros((len(vs), len(us)))
    valid2d = sv.pixel_valid()

    def run_rows(lo: int, hi: int) -> None:
        for ri in range(lo, hi):
            v = vs[ri]
            x = win[v, us, k0].reshape(len(us), -1).astype(np.float64)
            if params.normalization:
                x = normalize_patches(x)
            p, _ = _forward_batch(params, x)
            p = np.where(valid2d[v, us], p, 0.0)
            lattice[ri] = p

    if threads == 1:
        run_rows(0, len(vs))
    else:
        bounds = np.linspace(0, len(vs), threads + 1).astype(int)
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futs = [pool.submit(run_rows, int(a), int(b))
                    for a, b in zip(bounds[:-1], bounds[1:])]
            for f in futs:
                f.result()

    prob = np.zeros((h, w))
    if stride == 1:
        prob[v0:v1, u0:u1] = lattice
    else:
        interp = RegularGridInterpolator((vs.astype(float), us.astype(float)),
                                         lattice, method="linear")
        gu, gv = np.meshgrid(np.arange(u0, u1, dtype=float),
                             np.arange(v0, v1, dtype=float))
        prob[v0:v1, u0:u1] = interp(
            np.column_stack([gv.ravel(), gu.ravel()])).reshape(v1 - v0,
                                                               u1 - u0)
    mask = np.zeros((h, w), dtype=bool)
    mask[v0:v1, u0:u1] = valid2d[v0:v1, u0:u1]
    prob[~mask] = 0.0
    return PredictionImage(prob=prob, mask=mask)


def save_params(params: ModelParams, path) -> None:
    """Header (magic, layer sizes, input shape, norm flag) + f32 arrays."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(PARAMS_MAGIC)
        fh.write(struct.pack("<i", len(params.layer_sizes)))
        fh.write(struct.pack(f"<{len(params.layer_sizes)}i",
                             *params.layer_sizes))
        fh.write(struct.pack("<3i", *params.input_shape))
        fh.write(struct.pack("<i", int(params.normalization)))
        for w, b in zip(params.weights, params.biases):
            fh.write(np.ascontiguousarray(w, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f4").tobytes())


def load_params(path) -> ModelParams:
    raw = Path(path).read_bytes()
    if raw[:8] != PARAMS_MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:8]!r}")
    off = 8
    (n_sizes,) = struct.unpack_from("<i", raw, off)
    off += 4
    sizes = list(struct.unpack_from(f"<{n_sizes}i", raw, off))
    off += 4 * n_sizes
    shape = struct.unpack_from("<3i", raw, off)
    off += 12
    (norm,) = struct.unpack_from("<i", raw, off)
    off += 4
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        w = np.frombuffer(raw, dtype="<f4", count=fan_in * fan_out,
                          offset=off).reshape(fan_in, fan_out)
        off += 4 * fan_in * fan_out
        b = np.frombuffer(raw, dtype="<f4", count=fan_out, offset=off)
        off += 4 * fan_out
        weights.append(w.astype(np.float64))
        biases.append(b.astype(np.float64))
    if off != len(raw):
        raise ValueError(f"{path}: {len(raw) - off} trailing bytes")
    return ModelParams(layer_sizes=sizes, weights=weights, biases=biases,
                       input_shape=tuple(shape), normalization=bool(norm))


def save_prediction(pred: PredictionImage, outdir) -> None:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    img = np.rint(np.clip(pred.prob, 0.0, 1.0) * 65535).astype(np.uint16)
    Image.fromarray(img).save(outdir / "prob.tif")
    Image.fromarray(pred.mask.astype(np.uint8) * np.uint8(255)).save(
        outdir / "mask.png")


def load_prediction(outdir) -> PredictionImage:
    outdir = Path(outdir)
    prob = np.asarray(Image.open(outdir / "prob.tif"),
                      dtype=np.uint16).astype(np.float64) / 65535.0
    mask = np.asarray(Image.open(outdir / "mask.png")) > 0
    return PredictionImage(prob=prob, mask=mask)


def write_loss_trace(path, trace: list[dict]) -> None:
    cols = ["batch", "loss", "holdout_bce", "holdout_dice"]
    lines = [",".join(cols)]
    for row in trace:
        lines.append(",".join(
            "" if row.get(c) is None else
            (str(row[c]) if c == "batch" else f"{row[c]:.8f}")
            for c in cols))
    Path(path).write_text("\n".join(lines) + "\n")


def read_loss_trace(path) -> list[dict]:
    lines = Path(path).read_text().splitlines()
    header = lines[0].split(",")
    out = []
    for line in lines[1:]:
        if not line:
            continue
        row = {}
        for key, val in zip(header, line.split(",")):
            if val == "":
                continue
            row[key] = int(val) if key == "batch" else float(val)
        out.append(row)
    return out
