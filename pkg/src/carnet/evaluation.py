"""Thresholded precision / recall / F1, ODS and OIS scores, PR-curve export.

A pixel is predicted positive when ``prob >= threshold`` (compared in float64)
and matched against the ground truth pixel-exactly.  ODS sums TP/FP/FN over
the whole dataset for each threshold; OIS averages each image's best F1.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

DEFAULT_THRESHOLDS = np.round(np.arange(1, 100) / 100.0, 2)


class EvalError(ValueError):
    """Invalid evaluation input."""


@dataclass
class PredictionPair:
    prob: np.ndarray
    gt: np.ndarray
    id: str = ""

    def __post_init__(self):
        self.prob = np.asarray(self.prob)
        self.gt = np.asarray(self.gt)
        if self.prob.shape != self.gt.shape:
            raise EvalError(f"{self.id or 'pair'}: prob shape {self.prob.shape} != gt shape {self.gt.shape}")
        if not np.isin(self.gt, (0, 1)).all():
            raise EvalError(f"{self.id or 'pair'}: ground truth is not binary")
        if self.prob.size and (np.nanmin(self.prob) < 0 or np.nanmax(self.prob) > 1 or np.isnan(self.prob).any()):
            raise EvalError(f"{self.id or 'pair'}: probabilities must lie in [0, 1]")


def scores_from_counts(tp, fp, fn):
    """Vectorized precision, recall, F1 with the empty-denominator conventions.

    precision = 1 when nothing is predicted, recall = 1 when nothing is
    positive, F1 = 0 when precision + recall = 0.
    """
    tp, fp, fn = (np.asarray(a, dtype=np.float64) for a in (tp, fp, fn))
    with np.errstate(divide="ignore", invalid="ignore"):
        p = np.where(tp + fp > 0, tp / (tp + fp), 1.0)
        r = np.where(tp + fn > 0, tp / (tp + fn), 1.0)
        f = np.where(p + r > 0, 2 * p * r / (p + r), 0.0)
    return p, r, f


def _check_binary(a, what):
    a = np.asarray(a)
    if not np.isin(a, (0, 1)).all():
        raise EvalError(f"{what} is not binary")
    return a.astype(bool)


def prf(pred, gt) -> tuple[float, float, float]:
    pred = _check_binary(pred, "prediction")
    gt = _check_binary(gt, "ground truth")
    if pred.shape != gt.shape:
        raise EvalError(f"prediction shape {pred.shape} != gt shape {gt.shape}")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    p, r, f = scores_from_counts(tp, fp, fn)
    return float(p), float(r), float(f)


def _thresholds(thresholds):
    t = np.asarray(DEFAULT_THRESHOLDS if thresholds is None else thresholds, dtype=np.float64)
    if t.ndim != 1 or t.size == 0:
        raise EvalError("thresholds must be a non-empty 1-D sequence")
    if np.any(np.diff(t) <= 0):
        raise EvalError("thresholds must be strictly ascending")
    return t


def image_counts(pair: PredictionPair, thresholds) -> np.ndarray:
    """Integer (TP, FP, FN) per threshold for one image, shape (T, 3)."""
    t = _thresholds(thresholds)
    prob = pair.prob.astype(np.float64).ravel()
    gt = pair.gt.ravel().astype(bool)
    pos = np.sort(prob[gt])
    neg = np.sort(prob[~gt])
    # number of values >= t
    tp = pos.size - np.searchsorted(pos, t, side="left")
    fp = neg.size - np.searchsorted(neg, t, side="left")
    fn = pos.size - tp
    return np.stack([tp, fp, fn], axis=1).astype(np.int64)


def _all_counts(pairs, t):
    pairs = list(pairs)
    if not pairs:
        raise EvalError("evaluation needs at least one prediction pair")
    return pairs, np.stack([image_counts(p, t) for p in pairs])


def ods(pairs, thresholds=None) -> tuple[float, float]:
    """Best dataset-level F1 and its threshold (ties go to the lower threshold)."""
    t = _thresholds(thresholds)
    _, counts = _all_counts(pairs, t)
    tot = counts.sum(axis=0)
    _, _, f = scores_from_counts(tot[:, 0], tot[:, 1], tot[:, 2])
    i = int(np.argmax(f))
    return float(f[i]), float(t[i])


def ois(pairs, thresholds=None) -> float:
    t = _thresholds(thresholds)
    _, counts = _all_counts(pairs, t)
    _, _, f = scores_from_counts(counts[..., 0], counts[..., 1], counts[..., 2])
    return float(f.max(axis=1).mean())


@dataclass
class EvalReport:
    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    ods: float
    ods_threshold: float
    ois: float
    per_image: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        per_t = [{"threshold": float(t), "precision": float(p), "recall": float(r), "f1": float(f)}
                 for t, p, r, f in zip(self.thresholds, self.precision, self.recall, self.f1)]
        return {"ods": self.ods, "ods_threshold": self.ods_threshold, "ois": self.ois,
                "per_threshold": per_t, "per_image": self.per_image}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def curve(self) -> list[tuple[float, float]]:
        """(recall, precision) points ordered by threshold."""
        return list(zip(self.recall.tolist(), self.precision.tolist()))


def evaluate(pairs, thresholds=None) -> EvalReport:
    t = _thresholds(thresholds)
    pairs, counts = _all_counts(pairs, t)
    tot = counts.sum(axis=0)
    p, r, f = scores_from_counts(tot[:, 0], tot[:, 1], tot[:, 2])
    i = int(np.argmax(f))
    _, _, fi = scores_from_counts(counts[..., 0], counts[..., 1], counts[..., 2])
    best = fi.argmax(axis=1)
    per_image = [{"id": pr.id, "best_f1": float(fi[k, best[k]]), "threshold": float(t[best[k]])}
                 for k, pr in enumerate(pairs)]
    return EvalReport(t, p, r, f, float(f[i]), float(t[i]), float(fi.max(axis=1).mean()), per_image)


def pr_curve(pairs, thresholds=None) -> list[tuple[float, float, float, float]]:
    """Dataset-level (threshold, precision, recall, f1) rows, one per threshold."""
    rep = evaluate(pairs, thresholds)
    return list(zip(rep.thresholds.tolist(), rep.precision.tolist(), rep.recall.tolist(), rep.f1.tolist()))


def write_pr_csv(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["threshold", "precision", "recall", "f1"])
        for t, p, r, f in rows:
            wr.writerow([f"{t:.2f}", repr(p), repr(r), repr(f)])


def pr_svg(rows, size: int = 320, margin: int = 40, title: str = "") -> str:
    """Recall on x, precision on y, unit square."""
    span = size - 2 * margin

    def xy(r, p):
        return margin + r * span, size - margin - p * span

    pts = " ".join("%.2f,%.2f" % xy(r, p) for _, p, r, _ in rows)
    ticks = []
    for v in (0.0, 0.5, 1.0):
        x, _ = xy(v, 0)
        _, y = xy(0, v)
        ticks.append(f'<text x="{x:.1f}" y="{size - margin + 16}" font-size="10" text-anchor="middle">{v:.1f}</text>')
        ticks.append(f'<text x="{margin - 6}" y="{y + 3:.1f}" font-size="10" text-anchor="end">{v:.1f}</text>')
    return "\n".join([
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
        f'<rect x="{margin}" y="{margin}" width="{span}" height="{span}" fill="none" stroke="#888"/>',
        *ticks,
        f'<text x="{size / 2}" y="{size - 6}" font-size="11" text-anchor="middle">recall</text>',
        f'<text x="12" y="{size / 2}" font-size="11" text-anchor="middle" '
        f'transform="rotate(-90 12 {size / 2})">precision</text>',
        f'<text x="{size / 2}" y="{margin - 12}" font-size="12" text-anchor="middle">{title}</text>',
        f'<polyline fill="none" stroke="#c0392b" stroke-width="1.5" points="{pts}"/>',
        "</svg>",
    ]) + "\n"


def write_pr_svg(path, rows, title: str = ""):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(pr_svg(rows, title=title))


def predict_pairs(model, samples) -> list[PredictionPair]:
    """Eval-mode probability maps for ``samples`` (objects with id, image, mask)."""
    was_training = model.training
    model.eval()
    out = []
    try:
        for s in samples:
            prob = model.forward(s.image[None])[0, 0]
            out.append(PredictionPair(prob, s.mask, s.id))
    finally:
        model.train(was_training)
    return out
