"""Deterministic weak labeling from SNR and the text-intent output."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from typing import Sequence

from .corpus import Intent, Label, UtteranceRecord, WeakLabel

LOW_SNR_DB = 5.0
HIGH_SNR_DB = 15.0


def weak_label(snr_db: float, intent: Intent, low_db: float = LOW_SNR_DB, high_db: float = HIGH_SNR_DB) -> WeakLabel:
    """Noisy SNR band + intent rule.

    Quiet-but-background (``snr <= low_db`` and Background) is unintended,
    clean-and-not-background (``snr >= high_db`` and NotBackground) is
    intended, everything else is discarded.
    """
    if not math.isfinite(snr_db):
        raise ValueError("snr_db must be finite")
    intent = Intent(intent)
    if snr_db <= low_db and intent is Intent.BACKGROUND:
        return WeakLabel.UNINTENDED
    if snr_db >= high_db and intent is Intent.NOT_BACKGROUND:
        return WeakLabel.INTENDED
    return WeakLabel.DISCARDED


@dataclass
class CoverageStats:
    n_total: int
    n_discarded: int
    discard_fraction: float
    error_rate_unintended_branch: float
    error_rate_intended_branch: float
    weak_label_accuracy_on_covered: float

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)


def _rate(num: int, den: int) -> float:
    # an empty branch has no errors to report
    return num / den if den else 0.0


def coverage_stats(records: Sequence[UtteranceRecord], labels: Sequence[WeakLabel]) -> CoverageStats:
    n = len(records)
    n_disc = sum(w is WeakLabel.DISCARDED for w in labels)
    u_tot = u_err = i_tot = i_err = 0
    for r, w in zip(records, labels):
        if w is WeakLabel.UNINTENDED:
            u_tot += 1
            u_err += r.true_label is Label.INTENDED
        elif w is WeakLabel.INTENDED:
            i_tot += 1
            i_err += r.true_label is Label.UNINTENDED
    covered = u_tot + i_tot
    return CoverageStats(
        n_total=n,
        n_discarded=n_disc,
        discard_fraction=_rate(n_disc, n),
        error_rate_unintended_branch=_rate(u_err, u_tot),
        error_rate_intended_branch=_rate(i_err, i_tot),
        weak_label_accuracy_on_covered=_rate(covered - u_err - i_err, covered),
    )


def apply_weak_labels(
    records: Sequence[UtteranceRecord],
    low_db: float = LOW_SNR_DB,
    high_db: float = HIGH_SNR_DB,
    limit: int | None = None,
) -> tuple[list[UtteranceRecord], CoverageStats]:
    """Label ``records`` and keep the covered ones.

    Returned records are copies with ``weak_label`` set; the inputs are not
    modified.  ``limit`` truncates the kept subset (in corpus order) after
    the statistics have been computed on all records.
    """
    if low_db >= high_db:
        raise ValueError("low_db must be below high_db")
    labels = [weak_label(r.snr_db, r.intent_output, low_db, high_db) for r in records]
    stats = coverage_stats(records, labels)
    kept = [
        dataclasses.replace(r, weak_label=w) for r, w in zip(records, labels) if w is not WeakLabel.DISCARDED
    ]
    if limit is not None:
        kept = kept[:limit]
    return kept, stats


def test_band_report(
    records: Sequence[UtteranceRecord], low_db: float = LOW_SNR_DB, high_db: float = HIGH_SNR_DB
) -> tuple[float, float]:
    """(fraction outside the labeling band, weak-label accuracy on the rest)."""
    labels = [weak_label(r.snr_db, r.intent_output, low_db, high_db) for r in records]
    stats = coverage_stats(records, labels)
    return stats.discard_fraction, stats.weak_label_accuracy_on_covered


# keep pytest from collecting the report function when imported into tests
test_band_report.__test__ = False


def weak_targets(records: Sequence[UtteranceRecord]):
    """0/1 training targets from weak labels (1 = intended)."""
    out = []
    for r in records:
        if r.weak_label is None or r.weak_label is WeakLabel.DISCARDED:
            raise ValueError(f"record {r.id} has no usable weak label")
        out.append(int(r.weak_label is WeakLabel.INTENDED))
    return out
