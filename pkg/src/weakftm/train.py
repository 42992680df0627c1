"""Losses, frozen teacher scores and the mini-batch training loop."""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import numkit as nk
from .evalkit import equal_error_rate

log = logging.getLogger(__name__)

SCORE_KL = "score-kl"
EMBEDDING_MSE = "embedding-mse"


@dataclass
class KdHyper:
    alpha: float = 10.0
    eps: float = 1e-7
    variant: str = SCORE_KL

    def validate(self) -> None:
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if not 0.0 < self.eps < 0.5:
            raise ValueError("eps must lie in (0, 0.5)")
        if self.variant not in (SCORE_KL, EMBEDDING_MSE):
            raise ValueError(f"unknown distillation variant {self.variant!r}")


@dataclass
class TrainHyper:
    learning_rate: float = 1e-3
    clip_norm: float = 1.0
    dropout_rate: float = 0.1
    batch_size: int = 32
    max_epochs: int = 50
    patience: int = 5
    seed: int = 0

    def validate(self) -> None:
        if self.learning_rate <= 0 or self.clip_norm <= 0:
            raise ValueError("learning_rate and clip_norm must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError("batch_size, max_epochs and patience must be positive")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def _clamp(p, eps):
    return np.clip(np.asarray(p, dtype=float), eps, 1.0 - eps)


def bce_loss(p, y, eps: float = 1e-7):
    """Binary cross-entropy of P(intended) ``p`` against 0/1 target ``y``."""
    p = _clamp(p, eps)
    y = np.asarray(y, dtype=float)
    out = -(y * np.log(p) + (1.0 - y) * np.log1p(-p))
    return float(out) if out.ndim == 0 else out


def _logit(p):
    return np.log(p) - np.log1p(-p)


def sym_kl(p, q, eps: float = 1e-7):
    """KL(P||Q) + KL(Q||P) for the Bernoulli pairs ``(p, 1-p)`` and ``(q, 1-q)``.

    Collapses to ``(p - q) * (logit p - logit q)``.
    """
    p, q = _clamp(p, eps), _clamp(q, eps)
    out = (p - q) * (_logit(p) - _logit(q))
    return float(out) if out.ndim == 0 else out


def kd_loss(p_student, y_weak, p_teacher, hyper: KdHyper | None = None):
    hyper = hyper or KdHyper()
    if p_teacher is None:
        raise ValueError("kd_loss needs a teacher score")
    return bce_loss(p_student, y_weak, hyper.eps) + hyper.alpha * sym_kl(p_teacher, p_student, hyper.eps)


def _clamp_mask(p, eps):
    p = np.asarray(p, dtype=float)
    return (p > eps) & (p < 1.0 - eps)


def bce_loss_grad(p, y, eps: float = 1e-7):
    """Mean BCE over the batch and its gradient w.r.t. each ``p``."""
    pc = _clamp(p, eps)
    y = np.asarray(y, dtype=float)
    n = pc.size
    loss = float(np.mean(bce_loss(pc, y, eps)))
    dp = (-(y / pc) + (1.0 - y) / (1.0 - pc)) * _clamp_mask(p, eps) / n
    return loss, dp


def kd_loss_grad(p_student, y, p_teacher, hyper: KdHyper):
    """Mean of ``kd_loss`` over the batch and its gradient w.r.t. ``p_student``."""
    loss, dp = bce_loss_grad(p_student, y, hyper.eps)
    if hyper.alpha == 0:
        return loss, dp
    q = _clamp(p_student, hyper.eps)
    t = _clamp(p_teacher, hyper.eps)
    n = q.size
    kl = sym_kl(t, q, hyper.eps)
    # d/dq [(t - q)(logit t - logit q)]
    dkl = -(_logit(t) - _logit(q)) - (t - q) / (q * (1.0 - q))
    loss += hyper.alpha * float(np.mean(kl))
    dp = dp + hyper.alpha * dkl * _clamp_mask(p_student, hyper.eps) / n
    return loss, dp


def embed_mse_loss(student_embedding, teacher_embedding, projection: Mapping[str, np.ndarray]) -> float:
    """Mean squared difference between the projected student and the teacher embedding."""
    s = np.asarray(student_embedding, dtype=float)
    t = np.asarray(teacher_embedding, dtype=float)
    w, b = projection["proj_w"], projection["proj_b"]
    if s.shape[-1] != w.shape[0] or t.shape[-1] != w.shape[1]:
        raise ValueError(
            f"embedding sizes {s.shape[-1]} -> {t.shape[-1]} do not fit projection {w.shape}"
        )
    diff = s @ w + b - t
    return float(np.mean(diff * diff))


def embed_mse_grad(student_embedding, teacher_embedding, projection):
    """Batch-mean MSE, gradient w.r.t. the student embeddings and projection grads."""
    s, t = student_embedding, teacher_embedding
    w, b = projection["proj_w"], projection["proj_b"]
    diff = s @ w + b - t
    loss = float(np.mean(diff * diff))
    ds, dw, db = nk.linear_bwd(2.0 * diff / diff.size, s, w)
    return loss, ds, {"proj_w": dw, "proj_b": db}


# ---------------------------------------------------------------------------
# teacher scores
# ---------------------------------------------------------------------------


class MissingTeacherScore(KeyError):
    pass


def precompute_teacher_scores(records, teacher) -> dict[str, float]:
    """Frozen teacher P(intended) for every record, keyed by id."""
    lattices = [r.lattice for r in records]
    try:
        scores = teacher.decision_function(lattices)
    except ValueError:
        bad = []
        for r in records:
            try:
                r.lattice.validate()
            except ValueError:
                bad.append(r.id)
        raise ValueError(f"teacher scoring failed for ids: {', '.join(bad) or '(unknown)'}") from None
    return {r.id: float(s) for r, s in sorted(zip(records, scores), key=lambda x: x[0].id)}


def write_teacher_scores(path, scores: Mapping[str, float]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "score"])
        for k in sorted(scores):
            w.writerow([k, repr(float(scores[k]))])


def read_teacher_scores(path) -> dict[str, float]:
    with Path(path).open("r", newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["id", "score"]:
        raise ValueError(f"{path}: expected header 'id,score'")
    out = {}
    for n, row in enumerate(rows[1:], start=2):
        if len(row) != 2:
            raise ValueError(f"{path}: line {n}: expected 2 fields")
        v = float(row[1])
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"{path}: line {n}: score outside [0, 1]")
        out[row[0]] = v
    return out


def teacher_vector(ids: Sequence[str], scores: Mapping[str, float]) -> np.ndarray:
    missing = [i for i in ids if i not in scores]
    if missing:
        raise MissingTeacherScore(f"no teacher score for {len(missing)} ids, e.g. {missing[:5]}")
    return np.array([scores[i] for i in ids], dtype=float)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

BatchLoss = Callable[[nk.Params, np.ndarray, np.random.Generator], tuple[float, nk.Params]]


def fit_minibatch(
    params: nk.Params,
    batch_loss: BatchLoss,
    n_train: int,
    hyper: TrainHyper,
    dev_scorer: Callable[[nk.Params], np.ndarray] | None = None,
    y_dev=None,
    verbose: bool = False,
    tag: str = "model",
) -> tuple[nk.Params, list[dict]]:
    """Shuffled mini-batch Adam with global-norm clipping.

    With a dev scorer, the dev EER is logged each epoch and the best
    checkpoint is returned (early stop after ``patience`` epochs without
    improvement).  Raises ``FloatingPointError`` on a non-finite loss.
    """
    hyper.validate()
    if n_train < 1:
        raise ValueError("empty training set")
    rng = np.random.default_rng(hyper.seed)
    state = nk.AdamState.for_params(params, lr=hyper.learning_rate)
    history: list[dict] = []
    best_eer, best_params, wait = math.inf, params, 0
    for epoch in range(1, hyper.max_epochs + 1):
        perm = rng.permutation(n_train)
        total, seen = 0.0, 0
        for start in range(0, n_train, hyper.batch_size):
            idx = perm[start : start + hyper.batch_size]
            loss, grads = batch_loss(params, idx, rng)
            if not math.isfinite(loss):
                raise FloatingPointError(
                    f"{tag}: non-finite loss at epoch {epoch}, batch starting {start} "
                    f"(grad norm {nk.global_norm(grads):.3g})"
                )
            grads = nk.clip_global_norm(grads, hyper.clip_norm)
            params, state = nk.adam_step(params, grads, state)
            total += loss * idx.size
            seen += idx.size
        rec = {"epoch": epoch, "train_loss": total / seen, "dev_eer": None}
        if dev_scorer is not None:
            rec["dev_eer"] = equal_error_rate(dev_scorer(params), y_dev)
        history.append(rec)
        if verbose:
            log.info("%s epoch %d loss %.4f dev_eer %s", tag, epoch, rec["train_loss"], rec["dev_eer"])
        if dev_scorer is None:
            best_params = params
            continue
        if rec["dev_eer"] < best_eer:
            best_eer, best_params, wait = rec["dev_eer"], copy.deepcopy(params), 0
        else:
            wait += 1
            if wait >= hyper.patience:
                break
    return best_params, history
