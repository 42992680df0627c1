"""Acoustics-only student: splice/subsample front-end, post-LN self-attention
encoder, learned-query attention pooling and a 2-way softmax head."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import numkit as nk
from ._validation import check_binary_targets, check_feature_sequences
from .params_io import load_params, save_params

LN_EPS = 1e-5


@dataclass
class AftmConfig:
    d_feat: int = 40
    splice: int = 7
    subsample: int = 3
    n_layers: int = 6
    n_heads: int = 4
    d_head: int = 64
    d_ff: int = 1024
    dropout_rate: float = 0.1
    positional_encoding: bool = False

    @property
    def d_model(self) -> int:
        return self.n_heads * self.d_head

    @property
    def d_input(self) -> int:
        return self.splice * self.d_feat

    def validate(self) -> None:
        if min(self.d_feat, self.n_layers, self.n_heads, self.d_head, self.d_ff) < 1:
            raise ValueError("AFTM dimensions must be positive")
        if self.splice < 1 or self.splice % 2 == 0:
            raise ValueError("splice must be a positive odd number")
        if self.subsample < 1:
            raise ValueError("subsample must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")


TINY = dict(n_layers=2, n_heads=2, d_head=16, d_ff=64)


def aftm_param_count(config: AftmConfig) -> int:
    d, f = config.d_model, config.d_ff
    per_layer = 4 * (d * d + d) + (d * f + f) + (f * d + d) + 4 * d
    return (config.d_input * d + d) + config.n_layers * per_layer + (d * d + 2 * d) + (2 * d + 2)


def _uniform(rng, fan_in, shape):
    a = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-a, a, size=shape)


def init_aftm_params(config: AftmConfig, seed: int = 0) -> nk.Params:
    config.validate()
    rng = np.random.default_rng(seed)
    d, f = config.d_model, config.d_ff
    p = {"in_w": _uniform(rng, config.d_input, (config.d_input, d)), "in_b": _uniform(rng, config.d_input, d)}
    for i in range(config.n_layers):
        p.update(nk.init_attention(rng, d, prefix=f"l{i}."))
        p[f"l{i}.ln1_g"], p[f"l{i}.ln1_b"] = np.ones(d), np.zeros(d)
        p[f"l{i}.ff1_w"], p[f"l{i}.ff1_b"] = _uniform(rng, d, (d, f)), _uniform(rng, d, f)
        p[f"l{i}.ff2_w"], p[f"l{i}.ff2_b"] = _uniform(rng, f, (f, d)), _uniform(rng, f, d)
        p[f"l{i}.ln2_g"], p[f"l{i}.ln2_b"] = np.ones(d), np.zeros(d)
    p["pool_w"], p["pool_b"] = _uniform(rng, d, (d, d)), _uniform(rng, d, d)
    p["pool_q"] = _uniform(rng, d, d)
    p["out_w"], p["out_b"] = _uniform(rng, d, (d, 2)), _uniform(rng, d, 2)
    return p


# ---------------------------------------------------------------------------
# front-end
# ---------------------------------------------------------------------------


def splice_indices(n_frames: int, splice: int = 7, subsample: int = 3) -> np.ndarray:
    """(ceil(T/subsample), splice) frame indices; rows centred on 0, s, 2s, ..."""
    half = splice // 2
    centers = np.arange(0, n_frames, subsample)
    return np.clip(centers[:, None] + np.arange(-half, half + 1)[None, :], 0, n_frames - 1)


def splice_and_subsample(features, splice: int = 7, subsample: int = 3) -> np.ndarray:
    f = np.asarray(features)
    if f.ndim != 2 or f.shape[0] < 1:
        raise ValueError(f"expected a non-empty (T, d) feature matrix, got {f.shape}")
    idx = splice_indices(f.shape[0], splice, subsample)
    return f[idx].reshape(idx.shape[0], splice * f.shape[1])


def pad_batch(seqs, dtype=float) -> tuple[np.ndarray, np.ndarray]:
    """Stack (S_i, D) arrays into (B, S_max, D) with zeros and a validity mask."""
    lens = [s.shape[0] for s in seqs]
    s_max = max(lens)
    out = np.zeros((len(seqs), s_max, seqs[0].shape[1]), dtype=dtype)
    mask = np.zeros((len(seqs), s_max), dtype=bool)
    for i, s in enumerate(seqs):
        out[i, : s.shape[0]] = s
        mask[i, : s.shape[0]] = True
    return out, mask


def positional_table(length: int, d_model: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    rate = np.exp(-math.log(10000.0) * (np.arange(0, d_model, 2) / d_model))
    pe = np.zeros((length, d_model))
    pe[:, 0::2] = np.sin(pos * rate)
    pe[:, 1::2] = np.cos(pos * rate[: d_model // 2])
    return pe


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------


def _layer(params, i):
    pre = f"l{i}."
    return {k[len(pre) :]: v for k, v in params.items() if k.startswith(pre)}


def aftm_forward(x, mask, params: nk.Params, config: AftmConfig, rng: np.random.Generator | None = None):
    """x: (B, S, splice*d_feat) padded input, mask: (B, S).

    Returns ``(p_intended, embedding, cache)``.  Dropout is active only when
    ``rng`` is given.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=1).all():
        raise ValueError("every sequence needs at least one valid frame")
    rate = config.dropout_rate
    h = x @ params["in_w"] + params["in_b"]
    if config.positional_encoding:
        h = h + positional_table(h.shape[1], h.shape[2])
    layers = []
    for i in range(config.n_layers):
        lp = _layer(params, i)
        a, c_att = nk.mhsa_fwd(h, lp, mask, config.n_heads)
        a, k1 = nk.dropout_fwd(a, rate, rng)
        h1, c_ln1 = nk.layer_norm_fwd(h + a, lp["ln1_g"], lp["ln1_b"], LN_EPS)
        f1 = h1 @ lp["ff1_w"] + lp["ff1_b"]
        r, pos = nk.relu_fwd(f1)
        f2 = r @ lp["ff2_w"] + lp["ff2_b"]
        f2, k2 = nk.dropout_fwd(f2, rate, rng)
        h_out, c_ln2 = nk.layer_norm_fwd(h1 + f2, lp["ln2_g"], lp["ln2_b"], LN_EPS)
        layers.append((c_att, k1, c_ln1, h1, r, pos, k2, c_ln2))
        h = h_out
    u = np.tanh(h @ params["pool_w"] + params["pool_b"])
    e = np.where(mask, u @ params["pool_q"], -np.inf)
    w = nk.softmax(e, axis=1)
    emb = np.einsum("bs,bsd->bd", w, h)
    probs = nk.softmax(emb @ params["out_w"] + params["out_b"], axis=1)
    return probs[:, 1], emb, (x, layers, h, u, w, emb, probs)


def aftm_backward(
    dp: np.ndarray, params: nk.Params, config: AftmConfig, cache, d_emb_extra: np.ndarray | None = None
) -> tuple[nk.Params, np.ndarray]:
    """Returns ``(grads, d_input)`` given ``dL/dp_intended``."""
    x, layers, h, u, w, emb, probs = cache
    g: nk.Params = {}
    dprobs = np.zeros_like(probs)
    dprobs[:, 1] = dp
    dlogits = nk.softmax_backward(probs, dprobs, axis=1)
    d_emb, g["out_w"], g["out_b"] = nk.linear_bwd(dlogits, emb, params["out_w"])
    if d_emb_extra is not None:
        d_emb = d_emb + d_emb_extra
    # pooling
    dh = w[:, :, None] * d_emb[:, None, :]
    dw = np.einsum("bsd,bd->bs", h, d_emb)
    de = nk.softmax_backward(w, dw, axis=1)
    g["pool_q"] = np.einsum("bs,bsd->d", de, u)
    dpre = de[:, :, None] * params["pool_q"] * (1.0 - u * u)
    dh_pool, g["pool_w"], g["pool_b"] = nk.linear_bwd(dpre, h, params["pool_w"])
    dh = dh + dh_pool
    for i in reversed(range(config.n_layers)):
        lp = _layer(params, i)
        c_att, k1, c_ln1, h1, r, pos, k2, c_ln2 = layers[i]
        pre = f"l{i}."
        ds2, g[pre + "ln2_g"], g[pre + "ln2_b"] = nk.layer_norm_bwd(dh, c_ln2)
        df2 = nk.dropout_bwd(ds2, k2)
        dr, g[pre + "ff2_w"], g[pre + "ff2_b"] = nk.linear_bwd(df2, r, lp["ff2_w"])
        df1 = nk.relu_bwd(dr, pos)
        dh1_ff, g[pre + "ff1_w"], g[pre + "ff1_b"] = nk.linear_bwd(df1, h1, lp["ff1_w"])
        dh1 = ds2 + dh1_ff
        ds1, g[pre + "ln1_g"], g[pre + "ln1_b"] = nk.layer_norm_bwd(dh1, c_ln1)
        da = nk.dropout_bwd(ds1, k1)
        dh_att, ga = nk.mhsa_bwd(da, lp, c_att)
        for k, v in ga.items():
            g[pre + k] = v
        dh = ds1 + dh_att
    dx, g["in_w"], g["in_b"] = nk.linear_bwd(dh, x, params["in_w"])
    return g, dx


def aftm_embed(x, params: nk.Params, config: AftmConfig, mask=None) -> np.ndarray:
    """Pooled d_model-dim embedding of one spliced sequence (S, D) or a padded batch."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 2
    if single:
        x = x[None]
        mask = np.ones(x.shape[1], dtype=bool) if mask is None else mask
        mask = np.asarray(mask, dtype=bool)[None]
    elif mask is None:
        mask = np.ones(x.shape[:2], dtype=bool)
    emb = aftm_forward(x, mask, params, config)[1]
    return emb[0] if single else emb


def aftm_score(features, params: nk.Params, config: AftmConfig) -> float:
    f = np.asarray(getattr(features, "frames", features), dtype=float)
    if f.ndim != 2 or f.shape[0] == 0:
        raise ValueError("aftm_score needs a non-empty feature sequence")
    x = splice_and_subsample(f, config.splice, config.subsample)
    return float(aftm_forward(x[None], np.ones((1, x.shape[0]), bool), params, config)[0][0])


# ---------------------------------------------------------------------------
# estimator
# ---------------------------------------------------------------------------


class AcousticFTMClassifier(ClassifierMixin, BaseEstimator):
    """Self-attention classifier over frame features.

    ``X`` is a sequence of :class:`~weakftm.corpus.FeatureSequence` or
    ``(T, d_feat)`` arrays.  Passing ``teacher_scores`` to :meth:`fit`
    with ``alpha > 0`` trains the distilled variant.
    """

    def __init__(
        self,
        n_layers=6,
        n_heads=4,
        d_head=64,
        d_ff=1024,
        d_feat=40,
        splice=7,
        subsample=3,
        dropout_rate=0.1,
        positional_encoding=False,
        learning_rate=1e-3,
        clip_norm=1.0,
        batch_size=32,
        max_epochs=50,
        patience=5,
        alpha=0.0,
        kd_eps=1e-7,
        kd_variant="score-kl",
        score_batch_size=128,
        random_state=0,
        verbose=False,
    ):
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.d_head = d_head
        self.d_ff = d_ff
        self.d_feat = d_feat
        self.splice = splice
        self.subsample = subsample
        self.dropout_rate = dropout_rate
        self.positional_encoding = positional_encoding
        self.learning_rate = learning_rate
        self.clip_norm = clip_norm
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.alpha = alpha
        self.kd_eps = kd_eps
        self.kd_variant = kd_variant
        self.score_batch_size = score_batch_size
        self.random_state = random_state
        self.verbose = verbose

    @property
    def config(self) -> AftmConfig:
        return AftmConfig(
            d_feat=self.d_feat,
            splice=self.splice,
            subsample=self.subsample,
            n_layers=self.n_layers,
            n_heads=self.n_heads,
            d_head=self.d_head,
            d_ff=self.d_ff,
            dropout_rate=self.dropout_rate,
            positional_encoding=self.positional_encoding,
        )

    def _spliced(self, X):
        cfg = self.config
        return [
            splice_and_subsample(f, cfg.splice, cfg.subsample)
            for f in check_feature_sequences(X, n_feat=self.d_feat)
        ]

    def fit(self, X, y, teacher_scores=None, teacher_embeddings=None, X_dev=None, y_dev=None):
        from .train import EMBEDDING_MSE, KdHyper, TrainHyper, bce_loss_grad, embed_mse_grad, fit_minibatch, kd_loss_grad

        cfg = self.config
        cfg.validate()
        seqs = self._spliced(X)
        y = check_binary_targets(y, len(seqs))
        kd = KdHyper(alpha=self.alpha, eps=self.kd_eps, variant=self.kd_variant)
        kd.validate()
        distill = kd.alpha > 0
        if distill and kd.variant == EMBEDDING_MSE:
            if teacher_embeddings is None:
                raise ValueError("embedding distillation needs teacher_embeddings")
            t_emb = np.asarray(teacher_embeddings, dtype=float)
            if t_emb.shape[0] != len(seqs):
                raise ValueError("one teacher embedding per training sequence is required")
        elif distill:
            if teacher_scores is None:
                raise ValueError("distillation (alpha > 0) needs teacher_scores")
            t_score = np.asarray(teacher_scores, dtype=float)
            if t_score.shape != (len(seqs),):
                raise ValueError("one teacher score per training sequence is required")
        hyper = TrainHyper(
            learning_rate=self.learning_rate,
            clip_norm=self.clip_norm,
            dropout_rate=self.dropout_rate,
            batch_size=self.batch_size,
            max_epochs=self.max_epochs,
            patience=self.patience,
            seed=self.random_state,
        )
        params = init_aftm_params(cfg, self.random_state)
        use_proj = distill and kd.variant == EMBEDDING_MSE
        if use_proj:
            prng = np.random.default_rng([self.random_state, 1])
            a = 1.0 / math.sqrt(cfg.d_model)
            params["proj_w"] = prng.uniform(-a, a, size=(cfg.d_model, t_emb.shape[1]))
            params["proj_b"] = prng.uniform(-a, a, size=t_emb.shape[1])

        def batch_loss(p, idx, rng):
            xb, mb = pad_batch([seqs[i] for i in idx])
            prob, emb, cache = aftm_forward(xb, mb, p, cfg, rng)
            d_emb = None
            if distill and not use_proj:
                loss, dp = kd_loss_grad(prob, y[idx], t_score[idx], kd)
            else:
                loss, dp = bce_loss_grad(prob, y[idx], kd.eps)
            if use_proj:
                mse, d_emb, gproj = embed_mse_grad(emb, t_emb[idx], p)
                loss += kd.alpha * mse
                d_emb = kd.alpha * d_emb
            grads, _ = aftm_backward(dp, p, cfg, cache, d_emb)
            if use_proj:
                grads["proj_w"], grads["proj_b"] = kd.alpha * gproj["proj_w"], kd.alpha * gproj["proj_b"]
            return loss, grads

        dev_scorer = None
        if X_dev is not None:
            dev_seqs = self._spliced(X_dev)
            dev_scorer = lambda p: self._score_spliced(dev_seqs, p)  # noqa: E731
        tag = "aftm-d" if distill else "aftm"
        params, self.history_ = fit_minibatch(
            params, batch_loss, len(seqs), hyper, dev_scorer, y_dev, verbose=self.verbose, tag=tag
        )
        self.projection_ = {k: params.pop(k) for k in ("proj_w", "proj_b") if k in params}
        self.params_ = params
        self.classes_ = np.array([0, 1])
        return self

    def _score_spliced(self, seqs, params) -> np.ndarray:
        cfg = self.config
        # length-sorted batches keep padding small; masking makes the order irrelevant
        order = sorted(range(len(seqs)), key=lambda i: (seqs[i].shape[0], i))
        out = np.empty(len(seqs))
        for s in range(0, len(order), self.score_batch_size):
            idx = order[s : s + self.score_batch_size]
            xb, mb = pad_batch([seqs[i] for i in idx])
            out[idx] = aftm_forward(xb, mb, params, cfg)[0]
        return out

    def decision_function(self, X) -> np.ndarray:
        """Probability of the intended class."""
        check_is_fitted(self, "params_")
        return self._score_spliced(self._spliced(X), self.params_)

    def predict_proba(self, X) -> np.ndarray:
        p = self.decision_function(X)
        return np.stack([1.0 - p, p], axis=1)

    def predict(self, X) -> np.ndarray:
        return (self.decision_function(X) >= 0.5).astype(int)

    def embed(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        seqs = self._spliced(X)
        out = []
        for s in range(0, len(seqs), self.score_batch_size):
            xb, mb = pad_batch(seqs[s : s + self.score_batch_size])
            out.append(aftm_forward(xb, mb, self.params_, self.config)[1])
        return np.concatenate(out)

    def save(self, path) -> None:
        check_is_fitted(self, "params_")
        save_params(path, "aftm", dataclasses.asdict(self.config), self.params_)

    @classmethod
    def load(cls, path) -> "AcousticFTMClassifier":
        _, config, params = load_params(path, kind="aftm")
        est = cls(**config)
        expected = init_aftm_params(est.config)
        if set(expected) != set(params) or any(params[k].shape != v.shape for k, v in expected.items()):
            raise ValueError(f"{path}: stored tensors do not match the stored config")
        est.params_ = params
        est.projection_ = {}
        est.history_ = []
        est.classes_ = np.array([0, 1])
        return est
