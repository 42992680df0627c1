"""Input checks shared by the estimators."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .corpus import FeatureSequence, Lattice


def check_lattices(X, vocab_size: int | None = None) -> list[Lattice]:
    lats = list(X)
    if not lats:
        raise ValueError("expected at least one lattice")
    for i, lat in enumerate(lats):
        if not isinstance(lat, Lattice):
            raise TypeError(f"item {i} is {type(lat).__name__}, not a Lattice")
        lat.validate()
        if vocab_size is not None and lat.word.max() >= vocab_size:
            raise ValueError(f"lattice {i} uses word id {lat.word.max()} >= vocab_size {vocab_size}")
    return lats


def check_feature_sequences(X, n_feat: int | None = None) -> list[np.ndarray]:
    """Accepts FeatureSequence objects or (T, d) arrays; returns the arrays."""
    out = []
    for i, x in enumerate(X):
        frames = x.frames if isinstance(x, FeatureSequence) else np.asarray(x)
        if frames.ndim != 2 or frames.shape[0] == 0:
            raise ValueError(f"sequence {i}: expected a non-empty (T, d) matrix, got shape {frames.shape}")
        if n_feat is not None and frames.shape[1] != n_feat:
            raise ValueError(f"sequence {i}: expected {n_feat} features per frame, got {frames.shape[1]}")
        if not np.all(np.isfinite(frames)):
            raise ValueError(f"sequence {i}: non-finite feature values")
        out.append(frames)
    if not out:
        raise ValueError("expected at least one feature sequence")
    return out


def check_binary_targets(y, n: int) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != (n,):
        raise ValueError(f"expected {n} targets, got shape {y.shape}")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("targets must be 0 (unintended) or 1 (intended)")
    return y.astype(int)


def check_scores(scores: Sequence[float], name: str = "scores") -> np.ndarray:
    s = np.asarray(scores, dtype=float)
    if s.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional")
    if not np.all(np.isfinite(s)) or (s < 0).any() or (s > 1).any():
        raise ValueError(f"{name} must be probabilities in [0, 1]")
    return s
