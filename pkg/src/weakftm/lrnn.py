"""Lattice RNN teacher: embeds a lattice into a 16-D vector and scores it.

Nodes are visited in topological (node id) order.  Every arc runs one GRU
step from the state of its source node on ``[word embedding, posterior,
am_score, lm_score]``; a node's state is the posterior-weighted average of
its incoming arc states, with weights renormalized over the incoming arcs.
The end-node state is the lattice embedding.

Many lattices are processed together by stacking them into one disjoint
graph and stepping over local node ids.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import numkit as nk
from ._validation import check_binary_targets, check_lattices
from .corpus import Lattice
from .params_io import load_params, save_params

N_ARC_SCALARS = 3


@dataclass
class LrnnConfig:
    word_embedding_dim: int = 32
    hidden_dim: int = 16
    vocab_size: int = 64

    def validate(self) -> None:
        if min(self.word_embedding_dim, self.hidden_dim, self.vocab_size) <= 0:
            raise ValueError("LRNN dimensions must be positive")

    @property
    def input_dim(self) -> int:
        return self.word_embedding_dim + N_ARC_SCALARS


def lrnn_param_count(config: LrnnConfig) -> int:
    e, h, v, i = config.word_embedding_dim, config.hidden_dim, config.vocab_size, config.input_dim
    return v * e + 3 * (i * h + h * h + h) + h * 2 + 2


def init_lrnn_params(config: LrnnConfig, seed: int = 0) -> nk.Params:
    """Uniform in ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]`` per tensor."""
    config.validate()
    rng = np.random.default_rng(seed)
    a_emb = 1.0 / math.sqrt(config.vocab_size)
    a_out = 1.0 / math.sqrt(config.hidden_dim)
    params = {"embedding": rng.uniform(-a_emb, a_emb, size=(config.vocab_size, config.word_embedding_dim))}
    params.update(nk.init_gru(rng, config.input_dim, config.hidden_dim))
    params["out_w"] = rng.uniform(-a_out, a_out, size=(config.hidden_dim, 2))
    params["out_b"] = rng.uniform(-a_out, a_out, size=2)
    return params


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


@dataclass
class _Prepared:
    """Per-lattice arrays in canonical arc order, computed once."""

    n_nodes: int
    src: np.ndarray
    dst: np.ndarray
    word: np.ndarray
    scalars: np.ndarray
    weight: np.ndarray


def prepare_lattice(lat: Lattice) -> _Prepared:
    order = lat.canonical_order()
    src, dst = lat.src[order], lat.dst[order]
    post = lat.posterior[order]
    incoming = np.bincount(dst, weights=post, minlength=lat.n_nodes)
    indeg = np.bincount(dst, minlength=lat.n_nodes)
    weight = np.where(incoming[dst] > 0, post / np.where(incoming[dst] > 0, incoming[dst], 1.0), 1.0 / indeg[dst])
    scalars = np.stack([post, lat.am_score[order], lat.lm_score[order]], axis=1)
    return _Prepared(lat.n_nodes, src, dst, lat.word[order], scalars, weight)


@dataclass
class LatticeBatch:
    n_nodes: int
    src: np.ndarray
    dst: np.ndarray
    word: np.ndarray
    scalars: np.ndarray
    weight: np.ndarray
    ends: np.ndarray
    groups: list[np.ndarray]


def pack(prepared: Sequence[_Prepared]) -> LatticeBatch:
    sizes = np.array([p.n_nodes for p in prepared])
    offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    src = np.concatenate([p.src + o for p, o in zip(prepared, offsets)])
    dst = np.concatenate([p.dst + o for p, o in zip(prepared, offsets)])
    local = np.concatenate([p.src for p in prepared])
    # stable sort keeps canonical order inside each step
    order = np.argsort(local, kind="stable")
    groups = np.split(order, np.flatnonzero(np.diff(local[order])) + 1)
    return LatticeBatch(
        n_nodes=int(sizes.sum()),
        src=src,
        dst=dst,
        word=np.concatenate([p.word for p in prepared]),
        scalars=np.concatenate([p.scalars for p in prepared]),
        weight=np.concatenate([p.weight for p in prepared]),
        ends=offsets + sizes - 1,
        groups=groups,
    )


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------


def embed_fwd(batch: LatticeBatch, params: nk.Params):
    hidden = params["gru_u"].shape[0]
    if batch.word.size and batch.word.max() >= params["embedding"].shape[0]:
        raise ValueError("word id outside the embedding table")
    states = np.zeros((batch.n_nodes, hidden))
    x_arc = np.concatenate([params["embedding"][batch.word], batch.scalars], axis=1)
    caches = []
    for g in batch.groups:
        h_arc, cache = nk.gru_fwd(states[batch.src[g]], x_arc[g], params)
        np.add.at(states, batch.dst[g], batch.weight[g, None] * h_arc)
        caches.append(cache)
    return states[batch.ends], (batch, x_arc, caches, states.shape)


def embed_bwd(d_emb: np.ndarray, params: nk.Params, cache) -> nk.Params:
    batch, x_arc, caches, shape = cache
    d_states = np.zeros(shape)
    d_states[batch.ends] = d_emb
    d_x = np.zeros_like(x_arc)
    grads = {k: np.zeros_like(params[k]) for k in ("gru_w", "gru_u", "gru_b")}
    for g, c in zip(reversed(batch.groups), reversed(caches)):
        dh_arc = batch.weight[g, None] * d_states[batch.dst[g]]
        dh_in, dx, gg = nk.gru_bwd(dh_arc, params, c)
        np.add.at(d_states, batch.src[g], dh_in)
        d_x[g] = dx
        for k, v in gg.items():
            grads[k] += v
    d_table = np.zeros_like(params["embedding"])
    np.add.at(d_table, batch.word, d_x[:, : d_table.shape[1]])
    grads["embedding"] = d_table
    return grads


def lrnn_forward(batch: LatticeBatch, params: nk.Params):
    """Returns ``(p_intended, embeddings, cache)``."""
    emb, ecache = embed_fwd(batch, params)
    logits = emb @ params["out_w"] + params["out_b"]
    probs = nk.softmax(logits, axis=1)
    return probs[:, 1], emb, (ecache, emb, probs)


def lrnn_backward(dp: np.ndarray, params: nk.Params, cache, d_emb_extra: np.ndarray | None = None) -> nk.Params:
    """Gradient of a loss given ``dL/dp_intended`` (and optionally ``dL/d embedding``)."""
    ecache, emb, probs = cache
    dprobs = np.zeros_like(probs)
    dprobs[:, 1] = dp
    dlogits = nk.softmax_backward(probs, dprobs, axis=1)
    d_emb, gw, gb = nk.linear_bwd(dlogits, emb, params["out_w"])
    if d_emb_extra is not None:
        d_emb = d_emb + d_emb_extra
    grads = embed_bwd(d_emb, params, ecache)
    grads["out_w"], grads["out_b"] = gw, gb
    return grads


def lattice_embed(lattice: Lattice, params: nk.Params) -> np.ndarray:
    lattice.validate()
    return embed_fwd(pack([prepare_lattice(lattice)]), params)[0][0]


def lrnn_score(lattice: Lattice, params: nk.Params) -> float:
    lattice.validate()
    return float(lrnn_forward(pack([prepare_lattice(lattice)]), params)[0][0])


# ---------------------------------------------------------------------------
# estimator
# ---------------------------------------------------------------------------


class LatticeRNNClassifier(ClassifierMixin, BaseEstimator):
    """Device-directedness classifier over ASR lattices.

    ``X`` is a sequence of :class:`~weakftm.corpus.Lattice`; ``y`` holds 1
    for intended and 0 for unintended.  ``predict_proba`` columns follow
    ``classes_ == [0, 1]``.
    """

    def __init__(
        self,
        word_embedding_dim=32,
        hidden_dim=16,
        vocab_size=64,
        learning_rate=3e-3,
        clip_norm=1.0,
        batch_size=32,
        max_epochs=50,
        patience=5,
        score_batch_size=512,
        random_state=0,
        verbose=False,
    ):
        self.word_embedding_dim = word_embedding_dim
        self.hidden_dim = hidden_dim
        self.vocab_size = vocab_size
        self.learning_rate = learning_rate
        self.clip_norm = clip_norm
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.score_batch_size = score_batch_size
        self.random_state = random_state
        self.verbose = verbose

    @property
    def config(self) -> LrnnConfig:
        return LrnnConfig(self.word_embedding_dim, self.hidden_dim, self.vocab_size)

    def _prepare(self, X):
        return [prepare_lattice(lat) for lat in check_lattices(X, vocab_size=self.vocab_size)]

    def fit(self, X, y, X_dev=None, y_dev=None):
        from .train import TrainHyper, fit_minibatch

        prepared = self._prepare(X)
        y = check_binary_targets(y, len(prepared))
        hyper = TrainHyper(
            learning_rate=self.learning_rate,
            clip_norm=self.clip_norm,
            batch_size=self.batch_size,
            max_epochs=self.max_epochs,
            patience=self.patience,
            seed=self.random_state,
        )
        params = init_lrnn_params(self.config, self.random_state)

        def batch_loss(p, idx, rng):
            from .train import bce_loss_grad

            prob, _, cache = lrnn_forward(pack([prepared[i] for i in idx]), p)
            loss, dp = bce_loss_grad(prob, y[idx])
            return loss, lrnn_backward(dp, p, cache)

        dev_scorer = None
        if X_dev is not None:
            dev_prepared = self._prepare(X_dev)
            dev_scorer = lambda p: self._score_prepared(dev_prepared, p)  # noqa: E731
        self.params_, self.history_ = fit_minibatch(
            params, batch_loss, len(prepared), hyper, dev_scorer, y_dev, verbose=self.verbose, tag="lrnn"
        )
        self.classes_ = np.array([0, 1])
        return self

    def _score_prepared(self, prepared, params):
        out = []
        for s in range(0, len(prepared), self.score_batch_size):
            out.append(lrnn_forward(pack(prepared[s : s + self.score_batch_size]), params)[0])
        return np.concatenate(out) if out else np.zeros(0)

    def decision_function(self, X) -> np.ndarray:
        """Probability of the intended class."""
        check_is_fitted(self, "params_")
        return self._score_prepared(self._prepare(X), self.params_)

    def predict_proba(self, X) -> np.ndarray:
        p = self.decision_function(X)
        return np.stack([1.0 - p, p], axis=1)

    def predict(self, X) -> np.ndarray:
        return (self.decision_function(X) >= 0.5).astype(int)

    def embed(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        prepared = self._prepare(X)
        out = [
            embed_fwd(pack(prepared[s : s + self.score_batch_size]), self.params_)[0]
            for s in range(0, len(prepared), self.score_batch_size)
        ]
        return np.concatenate(out) if out else np.zeros((0, self.hidden_dim))

    def save(self, path) -> None:
        check_is_fitted(self, "params_")
        save_params(path, "lrnn", dataclasses.asdict(self.config), self.params_)

    @classmethod
    def load(cls, path) -> "LatticeRNNClassifier":
        _, config, params = load_params(path, kind="lrnn")
        est = cls(**config)
        expected = init_lrnn_params(est.config)
        for k, v in expected.items():
            if k not in params or params[k].shape != v.shape:
                raise ValueError(f"{path}: tensor {k!r} does not match the stored config")
        est.params_ = params
        est.history_ = []
        est.classes_ = np.array([0, 1])
        return est
