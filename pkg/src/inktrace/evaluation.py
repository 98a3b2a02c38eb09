"""Scoring for ink predictions.

Two levels: per-pixel metrics against labeled masks (BCE, Dice, recall,
false-positive rate; cross-validation folds are pooled before computing
ratios), and character-level metrics where two transcriptions are
aligned line by line with a minimum-edit-distance dynamic program.
"""

from __future__ import annotations

import unicodedata
from dataclasses import dataclass

import numpy as np

from .ink_model import PredictionImage, bce_loss
from .labeling import LabelImage


@dataclass(frozen=True)
class PixelMetrics:
    n: int
    tp: int
    fp: int
    fn: int
    tn: int
    bce: float
    dice: float
    recall: float | None
    fpr: float | None

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.n


def _metrics_from_arrays(p: np.ndarray, y: np.ndarray,
                         threshold: float) -> PixelMetrics:
    yb = y.astype(bool)
    pb = p >= threshold
    tp = int((pb & yb).sum())
    fp = int((pb & ~yb).sum())
    fn = int((~pb & yb).sum())
    tn = int((~pb & ~yb).sum())
    denom = 2 * tp + fp + fn
    dice = 2 * tp / denom if denom else 1.0
    recall = tp / (tp + fn) if tp + fn else None
    fpr = fp / (fp + tn) if fp + tn else None
    return PixelMetrics(n=len(p), tp=tp, fp=fp, fn=fn, tn=tn,
                        bce=bce_loss(p, yb.astype(np.float64)),
                        dice=dice, recall=recall, fpr=fpr)


def masked_pairs(pred: PredictionImage, label: LabelImage
                 ) -> tuple[np.ndarray, np.ndarray]:
    """Probability / truth pairs where both label and prediction exist."""
    if pred.prob.shape != label.ink.shape:
        raise ValueError(f"prediction {pred.prob.shape} and label "
                         f"{label.ink.shape} dims differ")
    mask = label.region & pred.mask
    if not mask.any():
        raise ValueError("no overlap between labeled region and prediction")
    return pred.prob[mask], label.ink[mask]


def pixel_metrics(pred: PredictionImage, label: LabelImage,
                  threshold: float = 0.5) -> PixelMetrics:
    p, y = masked_pairs(pred, label)
    return _metrics_from_arrays(p, y, threshold)


def compile_cross_validation(pairs: list[tuple[PredictionImage, LabelImage]],
                             threshold: float = 0.5) -> PixelMetrics:
    """Pool fold predictions pixel-wise, then compute the ratios once.

    Folds covering the same surface must not overlap; a shared pixel
    would be double counted and raises instead.
    """
    if not pairs:
        raise ValueError("no folds to pool")
    ps, ys = [], []
    seen: dict[tuple[int, int], np.ndarray] = {}
    for pred, label in pairs:
        p, y = masked_pairs(pred, label)
        mask = label.region & pred.mask
        prev = seen.get(mask.shape)
        if prev is not None and (prev & mask).any():
            raise ValueError("fold predictions overlap; pooled metrics "
                             "would double count pixels")
        seen[mask.shape] = mask | prev if prev is not None else mask
        ps.append(p)
        ys.append(y)
    return _metrics_from_arrays(np.concatenate(ps), np.concatenate(ys),
                                threshold)


def best_threshold_dice(values: np.ndarray, truth: np.ndarray,
                        mask: np.ndarray | None = None,
                        n_thresholds: int = 256) -> float:
    """Best Dice any global threshold achieves on ``values >= t``.

    The sweep covers the value range plus the degenerate all-positive
    cut, so a featureless image still gets credit for class prevalence.
    """
    if mask is not None:
        values = values[mask]
        truth = truth[mask]
    values = np.asarray(values, dtype=np.float64).ravel()
    truth = np.asarray(truth, dtype=bool).ravel()
    if not len(values):
        raise ValueError("empty value set for threshold sweep")
    lo, hi = float(values.min()), float(values.max())
    cuts = np.linspace(lo, hi, n_thresholds)
    npos = int(truth.sum())
    best = 0.0
    order = np.argsort(values, kind="stable")
    sv = values[order]
    st = truth[order]
    # tp(t) = positives with value >= t, via suffix sums of the sort
    suffix_tp = np.concatenate([np.cumsum(st[::-1])[::-1], [0]])
    for t in cuts:
        i = np.searchsorted(sv, t, side="left")
        pred_pos = len(sv) - i
        tp = int(suffix_tp[i])
        denom = pred_pos + npos
        dice = 2 * tp / denom if denom else 1.0
        best = max(best, dice)
    return best


def trace_stats(series: list[tuple[int, float]]) -> tuple[float, float]:
    """Mean and population std of trace values past the halfway batch."""
    if len(series) < 2:
        raise ValueError(f"need >= 2 trace entries, got {len(series)}")
    batches = np.array([b for b, _ in series], dtype=float)
    values = np.array([v for _, v in series], dtype=float)
    half = batches.max() / 2.0
    late = values[batches > half]
    if not len(late):
        raise ValueError("no trace entries past the halfway batch")
    return float(late.mean()), float(late.std())


# --- character-level scoring ------------------------------------------------

TRACE = "trace"
CHAR = "char"


@dataclass(frozen=True)
class Token:
    kind: str                 # "char" or "trace"
    char: str | None = None   # NFC letter (plus combining marks)
    certain: bool = True


@dataclass
class Transcription:
    """Ordered layers of token lines, as read by a papyrologist."""

    layers: list[tuple[str, list[list[Token]]]]

    def all_lines(self) -> list[list[Token]]:
        return [line for _, lines in self.layers for line in lines]


def _parse_line(line: str, lineno: int) -> list[Token]:
    tokens: list[Token] = []
    i = 0
    while i < len(line):
        ch = line[i]
        if ch in "][" or ch.isspace():
            i += 1
        elif ch == ".":
            tokens.append(Token(TRACE))
            i += 1
        elif ch == "(":
            j = line.find(")", i + 1)
            if j < 0:
                raise ValueError(f"line {lineno}: unclosed '('")
            inner = "".join(c for c in line[i + 1:j] if not c.isspace())
            if not inner or not inner[0].isalpha() or any(
                    not unicodedata.combining(c) for c in inner[1:]):
                raise ValueError(f"line {lineno}: '({line[i + 1:j]})' is not "
                                 "a single uncertain character")
            tokens.append(Token(CHAR, unicodedata.normalize("NFC", inner),
                                certain=False))
            i = j + 1
        elif ch == ")":
            raise ValueError(f"line {lineno}: ')' without '('")
        elif unicodedata.combining(ch):
            if not tokens or tokens[-1].kind != CHAR:
                raise ValueError(f"line {lineno}: combining mark with no "
                                 "base character")
            prev = tokens.pop()
            tokens.append(Token(CHAR,
                                unicodedata.normalize("NFC", prev.char + ch),
                                certain=prev.certain))
            i += 1
        elif ch.isalpha():
            tokens.append(Token(CHAR, unicodedata.normalize("NFC", ch)))
            i += 1
        else:
            raise ValueError(f"line {lineno}: unsupported character {ch!r}")
    return tokens


def parse_transcription(text: str) -> Transcription:
    """Parse diplomatic transcription text.

    ``.`` is an illegible trace, a letter is a certain character,
    ``(x)`` an uncertain one; brackets mark lost edges and are ignored.
    ``# layer <name>`` starts a new layer; other ``#`` lines are comments.
    """
    layers: list[tuple[str, list[list[Token]]]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if body.lower().startswith("layer"):
                layers.append((body[5:].strip(), []))
            continue
        if not layers:
            layers.append(("", []))
        layers[-1][1].append(_parse_line(line, lineno))
    return Transcription(layers=layers)


@dataclass(frozen=True)
class CharMetrics:
    gt_chars: int
    matched: int
    false_positives: int

    @property
    def recall(self) -> float:
        return self.matched / self.gt_chars if self.gt_chars else 1.0

    @property
    def fpr(self) -> float:
        return self.false_positives / max(1, self.matched
                                          + self.false_positives)


_SUB, _DEL, _INS = 0, 1, 2


def _pair_cost(a: Token, b: Token) -> float:
    if a.kind == CHAR and b.kind == CHAR:
        return 0.0 if a.char == b.char else 1.0
    return 0.25


def _align_line(gt: list[Token], pred: list[Token]
                ) -> list[tuple[Token | None, Token | None]]:
    """Minimum-edit alignment; ties prefer substitution, then the
    leftmost (ground-truth-consuming) move."""
    n, m = len(gt), len(pred)
    cost = np.zeros((n + 1, m + 1))
    move = np.zeros((n + 1, m + 1), dtype=np.int8)
    cost[:, 0] = np.arange(n + 1)
    move[1:, 0] = _DEL
    cost[0, :] = np.arange(m + 1)
    move[0, 1:] = _INS
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            options = (
                (cost[i - 1, j - 1] + _pair_cost(gt[i - 1], pred[j - 1]),
                 _SUB),
                (cost[i - 1, j] + 1.0, _DEL),
                (cost[i, j - 1] + 1.0, _INS),
            )
            cost[i, j], move[i, j] = min(options, key=lambda t: t[0])
    pairs: list[tuple[Token | None, Token | None]] = []
    i, j = n, m
    while i or j:
        mv = move[i, j]
        if mv == _SUB:
            pairs.append((gt[i - 1], pred[j - 1]))
            i -= 1
            j -= 1
        elif mv == _DEL:
            pairs.append((gt[i - 1], None))
            i -= 1
        else:
            pairs.append((None, pred[j - 1]))
            j -= 1
    pairs.reverse()
    return pairs


def char_metrics(gt: Transcription, pred: Transcription,
                 strict: bool = True) -> CharMetrics:
    """Character recall / false-positive rate between transcriptions.

    Lines are paired in order across layers and aligned independently.
    A matched character is an aligned pair reading the same letter; a
    predicted character aligned to a different letter or to nothing is
    false.  A prediction over an illegible ground-truth trace is neither
    (it cannot be verified).  With ``strict=False``, uncertain predicted
    characters are demoted to traces before scoring.
    """
    gt_lines = gt.all_lines()
    pred_lines = pred.all_lines()
    if len(gt_lines) != len(pred_lines):
        raise ValueError(f"line counts differ: {len(gt_lines)} ground truth "
                         f"vs {len(pred_lines)} predicted")
    gt_chars = matched = false = 0
    for gl, pl in zip(gt_lines, pred_lines):
        if not strict:
            pl = [Token(TRACE) if t.kind == CHAR and not t.certain else t
                  for t in pl]
        gt_chars += sum(t.kind == CHAR for t in gl)
        for a, b in _align_line(gl, pl):
            if b is None or b.kind != CHAR:
                continue
            if a is not None and a.kind == CHAR:
                if a.char == b.char:
                    matched += 1
                else:
                    false += 1
            elif a is None:
                false += 1
            # a is a trace: unverifiable, counts as neither
    return CharMetrics(gt_chars=gt_chars, matched=matched,
                       false_positives=false)


# --- delimited output --------------------------------------------------------

def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def write_csv(path, header: list[str], rows: list[dict]) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(row.get(col)) for col in header))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def metrics_row(name: str, m: PixelMetrics) -> dict:
    return {"fold": name, "n": m.n, "tp": m.tp, "fp": m.fp, "fn": m.fn,
            "tn": m.tn, "bce": m.bce, "dice": m.dice, "recall": m.recall,
            "fpr": m.fpr}


METRICS_HEADER = ["fold", "n", "tp", "fp", "fn", "tn", "bce", "dice",
                  "recall", "fpr"]


def format_metrics_table(rows: list[dict]) -> str:
    widths = {c: max(len(c), max((len(_fmt(r.get(c))) for r in rows),
                                 default=0)) for c in METRICS_HEADER}
    out = ["  ".join(c.ljust(widths[c]) for c in METRICS_HEADER)]
    for r in rows:
        out.append("  ".join(_fmt(r.get(c)).ljust(widths[c])
                             for c in METRICS_HEADER))
    return "\n".join(out)
