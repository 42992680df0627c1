"""Detection metrics (DET curve, EER, FA at fixed FR, DET area) and score fusion.

Orientation: a score is P(intended) and an utterance is accepted as
intended iff ``score >= threshold``.  FRR is the fraction of intended
utterances rejected, FAR the fraction of unintended ones accepted.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from ._validation import check_scores

FUSED_TAG = "fused"


@dataclass
class ScoreRecord:
    id: str
    model_tag: str
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score for {self.id} outside [0, 1]: {self.score}")


@dataclass
class DetCurve:
    threshold: np.ndarray
    frr: np.ndarray
    far: np.ndarray

    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.frr.tolist(), self.far.tolist()))


def det_curve(scores, labels) -> DetCurve:
    """Operating points at every distinct score plus the -inf/+inf sentinels."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be 1-D and of equal length")
    if np.isnan(s).any():
        raise ValueError("NaN score")
    pos, neg = np.sort(s[y == 1]), np.sort(s[y == 0])
    if pos.size == 0 or neg.size == 0:
        raise ValueError("det_curve needs both intended (1) and unintended (0) examples")
    if pos.size + neg.size != s.size:
        raise ValueError("labels must be 0 or 1")
    thr = np.concatenate([[-np.inf], np.unique(s), [np.inf]])
    rejected_pos = np.searchsorted(pos, thr, side="left")
    accepted_neg = neg.size - np.searchsorted(neg, thr, side="left")
    return DetCurve(thr, rejected_pos / pos.size, accepted_neg / neg.size)


def eer(curve: DetCurve) -> float:
    """FRR = FAR crossing, linearly interpolated between adjacent points."""
    d = curve.frr - curve.far
    i = int(np.argmax(d >= 0))
    if d[i] == 0 or i == 0:
        return float(curve.frr[i])
    t = -d[i - 1] / (d[i] - d[i - 1])
    return float(curve.frr[i - 1] + t * (curve.frr[i] - curve.frr[i - 1]))


def far_at_frr(curve: DetCurve, target_frr: float = 0.04) -> float:
    """FAR where the curve reaches FRR = ``target_frr``.

    On a vertical stretch at exactly the target, the lowest FAR is taken.
    """
    if not 0.0 <= target_frr <= 1.0:
        raise ValueError("target_frr must lie in [0, 1]")
    j = int(np.searchsorted(curve.frr, target_frr, side="right")) - 1
    if curve.frr[j] == target_frr or j == len(curve.frr) - 1:
        return float(curve.far[j])
    f0, f1 = curve.frr[j], curve.frr[j + 1]
    t = (target_frr - f0) / (f1 - f0)
    return float(curve.far[j] + t * (curve.far[j + 1] - curve.far[j]))


def auc_det(curve: DetCurve) -> float:
    """Trapezoidal area under FAR(FRR) on the unit square; 0 is perfect, 0.5 is chance."""
    x, y = curve.frr, curve.far
    return float(np.sum(np.diff(x) * (y[1:] + y[:-1]) * 0.5))


def metrics(scores, labels, target_frr: float = 0.04) -> dict:
    curve = det_curve(scores, labels)
    return {"eer": eer(curve), "fa_at_4pct_frr": far_at_frr(curve, target_frr), "auc": auc_det(curve)}


def equal_error_rate(scores, labels) -> float:
    return eer(det_curve(scores, labels))


# ---------------------------------------------------------------------------
# fusion
# ---------------------------------------------------------------------------


def _as_map(records) -> dict[str, float]:
    if isinstance(records, Mapping):
        return {str(k): float(v) for k, v in records.items()}
    return {r.id: float(r.score) for r in records}


def _aligned(a, b) -> tuple[list[str], np.ndarray, np.ndarray]:
    ma, mb = _as_map(a), _as_map(b)
    if ma.keys() != mb.keys():
        diff = sorted(set(ma) ^ set(mb))
        shown = ", ".join(diff[:10]) + (" ..." if len(diff) > 10 else "")
        raise ValueError(f"score sets differ in {len(diff)} ids: {shown}")
    ids = sorted(ma)
    return ids, np.array([ma[i] for i in ids]), np.array([mb[i] for i in ids])


def fuse_scores(a, b, tag: str = FUSED_TAG) -> list[ScoreRecord]:
    """Per-id mean of two score sets (lists of ScoreRecord or id -> score maps)."""
    ids, sa, sb = _aligned(a, b)
    fused = (sa + sb) / 2.0
    return [ScoreRecord(i, tag, float(s)) for i, s in zip(ids, fused)]


WEIGHT_GRID = np.arange(21) / 20.0


class WeightedScoreFusion:
    """Linear fusion ``w * a + (1 - w) * b`` with ``w`` picked on a grid by dev EER.

    Ties go to the weight closest to 0.5.
    """

    def __init__(self, grid: Sequence[float] | None = None):
        self.grid = grid

    def fit(self, dev_a, dev_b, dev_labels):
        grid = WEIGHT_GRID if self.grid is None else np.asarray(self.grid, dtype=float)
        sa, sb = check_scores(dev_a, "dev_a"), check_scores(dev_b, "dev_b")
        y = np.asarray(dev_labels)
        errs = np.array([equal_error_rate(w * sa + (1.0 - w) * sb, y) for w in grid])
        best = errs.min()
        cands = grid[errs == best]
        self.weight_ = float(cands[np.argmin(np.abs(cands - 0.5))])
        self.dev_eers_ = errs
        return self

    def transform(self, a, b) -> np.ndarray:
        w = self.weight_
        return w * check_scores(a, "a") + (1.0 - w) * check_scores(b, "b")


def weighted_fuse(a, b, dev_scores, dev_labels, tag: str = FUSED_TAG) -> tuple[float, list[ScoreRecord]]:
    """``dev_scores`` is the pair ``(dev_a, dev_b)`` of score arrays aligned with ``dev_labels``."""
    ids, sa, sb = _aligned(a, b)
    fuser = WeightedScoreFusion().fit(dev_scores[0], dev_scores[1], dev_labels)
    fused = fuser.transform(sa, sb)
    return fuser.weight_, [ScoreRecord(i, tag, float(s)) for i, s in zip(ids, fused)]


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------


def write_scores(path, records: Iterable[ScoreRecord]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "model_tag", "score"])
        for r in sorted(records, key=lambda r: r.id):
            w.writerow([r.id, r.model_tag, repr(float(r.score))])


def read_scores(path) -> list[ScoreRecord]:
    with Path(path).open("r", newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["id", "model_tag", "score"]:
        raise ValueError(f"{path}: expected header 'id,model_tag,score'")
    out = []
    for n, row in enumerate(rows[1:], start=2):
        if len(row) != 3:
            raise ValueError(f"{path}: line {n}: expected 3 fields")
        try:
            out.append(ScoreRecord(row[0], row[1], float(row[2])))
        except ValueError as exc:
            raise ValueError(f"{path}: line {n}: {exc}") from None
    return out


def write_det(path, curve: DetCurve) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "frr", "far"])
        for t, fr, fa in zip(curve.threshold, curve.frr, curve.far):
            w.writerow([repr(float(t)), repr(float(fr)), repr(float(fa))])


def write_metrics(path, table: Mapping[str, Mapping[str, float]]) -> None:
    Path(path).write_text(json.dumps(table, indent=2, sort_keys=False) + "\n", encoding="utf-8")


def format_table(table: Mapping[str, Mapping[str, float]]) -> str:
    """Fixed-width text rendering: EER and AUC in %, FA@4%FR in %."""
    lines = [f"{'':<16}{'EER':>8}{'FA@4%FR':>10}{'AUC':>8}"]
    for name, m in table.items():
        lines.append(
            f"{name:<16}{100 * m['eer']:>8.1f}{100 * m['fa_at_4pct_frr']:>10.1f}{100 * m['auc']:>8.2f}"
        )
    return "\n".join(lines)


_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf")


def det_svg(curves: Mapping[str, DetCurve], size: int = 400, margin: int = 50) -> str:
    """Linear-axis DET plot, FAR on x and FRR on y, one polyline per model."""
    span = size - 2 * margin
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
        f'<rect x="{margin}" y="{margin}" width="{span}" height="{span}" fill="none" stroke="black"/>',
        f'<text x="{size / 2}" y="{size - 12}" text-anchor="middle" font-size="12">FAR</text>',
        f'<text x="14" y="{size / 2}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 14 {size / 2})">FRR</text>',
    ]
    for k, (name, c) in enumerate(curves.items()):
        color = _PALETTE[k % len(_PALETTE)]
        pts = " ".join(
            f"{margin + fa * span:.2f},{margin + (1.0 - fr) * span:.2f}" for fr, fa in zip(c.frr, c.far)
        )
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"><title>{name}</title></polyline>')
        parts.append(
            f'<text x="{size - margin - 4}" y="{margin + 16 + 14 * k}" text-anchor="end" '
            f'font-size="11" fill="{color}">{name}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
