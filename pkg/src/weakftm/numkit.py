"""Small differentiable numeric core.

Every op comes as a forward function returning ``(output, cache)`` and a
matching backward function consuming the upstream gradient and the cache.
Convenience wrappers without the cache exist for the ops that are used on
their own (``softmax``, ``layer_norm``, ``gru_step``,
``multi_head_self_attention``).

Parameters are handled as ``dict[str, np.ndarray]``; gradients use the same
keys.  Nothing in here keeps state, so all functions are safe to call from
several threads at once.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

Params = dict[str, np.ndarray]


# ---------------------------------------------------------------------------
# softmax
# ---------------------------------------------------------------------------


def softmax(v, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax along ``axis``."""
    v = np.asarray(v, dtype=float)
    if v.size == 0 or v.shape[axis] == 0:
        raise ValueError("softmax of an empty vector")
    m = np.max(v, axis=axis, keepdims=True)
    e = np.exp(v - m)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax_backward(p: np.ndarray, dp: np.ndarray, axis: int = -1) -> np.ndarray:
    """Gradient w.r.t. the logits given ``p = softmax(v)`` and ``dL/dp``."""
    return p * (dp - np.sum(dp * p, axis=axis, keepdims=True))


# ---------------------------------------------------------------------------
# elementwise / dense
# ---------------------------------------------------------------------------


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x, dtype=float)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def linear_fwd(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    return x @ w + b, x


def linear_bwd(dy: np.ndarray, x: np.ndarray, w: np.ndarray):
    """Returns ``(dx, dw, db)`` for ``y = x @ w + b`` with arbitrary leading axes."""
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    return dy @ w.T, x2.T @ dy2, dy2.sum(axis=0)


def relu_fwd(x: np.ndarray):
    return np.maximum(x, 0.0), x > 0


def relu_bwd(dy: np.ndarray, positive: np.ndarray) -> np.ndarray:
    return dy * positive


def dropout_fwd(x: np.ndarray, rate: float, rng: np.random.Generator | None):
    """Inverted dropout. With ``rng is None`` or ``rate == 0`` it is the identity."""
    if rng is None or rate <= 0.0:
        return x, None
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * keep, keep


def dropout_bwd(dy: np.ndarray, keep: np.ndarray | None) -> np.ndarray:
    return dy if keep is None else dy * keep


# ---------------------------------------------------------------------------
# layer normalization
# ---------------------------------------------------------------------------


def layer_norm_fwd(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-5):
    """Normalizes over the last axis."""
    if x.shape[-1] != gamma.shape[-1] or x.shape[-1] != beta.shape[-1]:
        raise ValueError(
            f"layer_norm size mismatch: x {x.shape[-1]}, gamma {gamma.shape[-1]}, beta {beta.shape[-1]}"
        )
    if eps <= 0:
        raise ValueError("eps must be positive")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return gamma * xhat + beta, (xhat, rstd, gamma)


def layer_norm_bwd(dy: np.ndarray, cache):
    xhat, rstd, gamma = cache
    n = xhat.shape[-1]
    dxhat = dy * gamma
    dx = rstd * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True) / n
    )
    lead = tuple(range(dy.ndim - 1))
    return dx, (dy * xhat).sum(axis=lead), dy.sum(axis=lead)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return layer_norm_fwd(x, np.asarray(gamma, float), np.asarray(beta, float), eps)[0]


# ---------------------------------------------------------------------------
# multi-head self-attention
# ---------------------------------------------------------------------------

ATTENTION_KEYS = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")


def init_attention(rng: np.random.Generator, d_model: int, prefix: str = "") -> Params:
    a = 1.0 / math.sqrt(d_model)
    p = {}
    for name in ("q", "k", "v", "o"):
        p[f"{prefix}w{name}"] = rng.uniform(-a, a, size=(d_model, d_model))
        p[f"{prefix}b{name}"] = rng.uniform(-a, a, size=d_model)
    return p


def _split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    b, t, d = x.shape
    return x.reshape(b, t, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    b, h, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dh)


def mhsa_fwd(x: np.ndarray, params: Mapping[str, np.ndarray], mask: np.ndarray, n_heads: int):
    """Scaled dot-product self-attention over a padded batch.

    x: (B, T, d); mask: (B, T) booleans, True for valid frames.  Keys at
    invalid positions get exactly zero weight.  Outputs at invalid query
    positions are computed but carry no meaning.
    """
    b, t, d = x.shape
    if d % n_heads:
        raise ValueError(f"d_model={d} is not divisible by n_heads={n_heads}")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (b, t):
        raise ValueError(f"mask shape {mask.shape} does not match input {(b, t)}")
    if not mask.any(axis=1).all():
        raise ValueError("attention over a fully masked sequence")
    d_head = d // n_heads
    q = _split_heads(x @ params["wq"] + params["bq"], n_heads)
    k = _split_heads(x @ params["wk"] + params["bk"], n_heads)
    v = _split_heads(x @ params["wv"] + params["bv"], n_heads)
    scale = 1.0 / math.sqrt(d_head)
    logits = (q @ k.transpose(0, 1, 3, 2)) * scale
    logits = np.where(mask[:, None, None, :], logits, -np.inf)
    attn = softmax(logits, axis=-1)
    ctx = _merge_heads(attn @ v)
    out = ctx @ params["wo"] + params["bo"]
    return out, (x, q, k, v, attn, ctx, scale, n_heads)


def mhsa_bwd(dout: np.ndarray, params: Mapping[str, np.ndarray], cache):
    x, q, k, v, attn, ctx, scale, n_heads = cache
    g = {}
    dctx, g["wo"], g["bo"] = linear_bwd(dout, ctx, params["wo"])
    dctx = _split_heads(dctx, n_heads)
    dattn = dctx @ v.transpose(0, 1, 3, 2)
    dv = attn.transpose(0, 1, 3, 2) @ dctx
    dlogits = softmax_backward(attn, dattn) * scale
    dq = dlogits @ k
    dk = dlogits.transpose(0, 1, 3, 2) @ q
    dx = np.zeros_like(x)
    for name, dproj in (("q", dq), ("k", dk), ("v", dv)):
        dxi, g[f"w{name}"], g[f"b{name}"] = linear_bwd(_merge_heads(dproj), x, params[f"w{name}"])
        dx += dxi
    return dx, g


def multi_head_self_attention(x, params, mask, n_heads: int) -> np.ndarray:
    """Single-sequence (T, d) or batched (B, T, d) attention."""
    x = np.asarray(x, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    if x.ndim == 2:
        return mhsa_fwd(x[None], params, mask[None], n_heads)[0][0]
    return mhsa_fwd(x, params, mask, n_heads)[0]


# ---------------------------------------------------------------------------
# GRU cell
# ---------------------------------------------------------------------------


def init_gru(rng: np.random.Generator, input_dim: int, hidden_dim: int) -> Params:
    """Gates stacked as [update | reset | candidate] along the last axis."""
    a_in, a_h = 1.0 / math.sqrt(input_dim), 1.0 / math.sqrt(hidden_dim)
    return {
        "gru_w": rng.uniform(-a_in, a_in, size=(input_dim, 3 * hidden_dim)),
        "gru_u": rng.uniform(-a_h, a_h, size=(hidden_dim, 3 * hidden_dim)),
        "gru_b": rng.uniform(-a_h, a_h, size=3 * hidden_dim),
    }


def gru_fwd(h: np.ndarray, x: np.ndarray, params: Mapping[str, np.ndarray]):
    w, u, bias = params["gru_w"], params["gru_u"], params["gru_b"]
    hd = u.shape[0]
    if h.shape[-1] != hd or x.shape[-1] != w.shape[0] or u.shape[1] != 3 * hd:
        raise ValueError(
            f"gru_step dims: h {h.shape[-1]}, x {x.shape[-1]}, expected h {hd}, x {w.shape[0]}"
        )
    xw = x @ w + bias
    hu_zr = h @ u[:, : 2 * hd]
    z = sigmoid(xw[..., :hd] + hu_zr[..., :hd])
    r = sigmoid(xw[..., hd : 2 * hd] + hu_zr[..., hd:])
    rh = r * h
    cand = np.tanh(xw[..., 2 * hd :] + rh @ u[:, 2 * hd :])
    h_new = (1.0 - z) * h + z * cand
    return h_new, (h, x, z, r, rh, cand)


def gru_bwd(dh_new: np.ndarray, params: Mapping[str, np.ndarray], cache):
    """Returns ``(dh, dx, grads)`` for a batch of GRU steps (leading axis = batch)."""
    h, x, z, r, rh, cand = cache
    u = params["gru_u"]
    hd = u.shape[0]
    dz = dh_new * (cand - h)
    dcand = dh_new * z
    dh = dh_new * (1.0 - z)
    da_c = dcand * (1.0 - cand * cand)
    drh = da_c @ u[:, 2 * hd :].T
    dr = drh * h
    dh += drh * r
    da_z = dz * z * (1.0 - z)
    da_r = dr * r * (1.0 - r)
    da = np.concatenate([da_z, da_r, da_c], axis=-1)
    dh += np.concatenate([da_z, da_r], axis=-1) @ u[:, : 2 * hd].T
    du = np.empty_like(u)
    du[:, : 2 * hd] = h.T @ np.concatenate([da_z, da_r], axis=-1)
    du[:, 2 * hd :] = rh.T @ da_c
    grads = {"gru_w": x.T @ da, "gru_u": du, "gru_b": da.sum(axis=0)}
    return dh, da @ params["gru_w"].T, grads


def gru_step(h, x, params) -> np.ndarray:
    """One GRU update; accepts single vectors or batches."""
    h = np.asarray(h, dtype=float)
    x = np.asarray(x, dtype=float)
    if h.ndim == 1:
        return gru_fwd(h[None], x[None], params)[0][0]
    return gru_fwd(h, x, params)[0]


# ---------------------------------------------------------------------------
# optimization
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Params = field(default_factory=dict)
    v: Params = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: Mapping[str, np.ndarray], **hyper) -> "AdamState":
        return cls(
            m={k: np.zeros_like(a) for k, a in params.items()},
            v={k: np.zeros_like(a) for k, a in params.items()},
            **hyper,
        )


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState):
    """One bias-corrected Adam update. Inputs are left untouched."""
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for '{k}'")
    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1**step, 1.0 - b2**step
    new_params, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for '{k}'")
        m = b1 * state.m.get(k, 0.0) + (1.0 - b1) * g
        v = b2 * state.v.get(k, 0.0) + (1.0 - b2) * g * g
        new_params[k] = p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_m[k], new_v[k] = m, v
    new_state = AdamState(state.lr, b1, b2, state.eps, step, new_m, new_v)
    return new_params, new_state


def global_norm(grads) -> float:
    if isinstance(grads, Mapping):
        return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    g = np.asarray(grads, dtype=float)
    return math.sqrt(float(np.sum(g * g)))


def clip_global_norm(grads, c: float):
    """Rescale ``grads`` (array or dict of arrays) so the joint L2 norm is at most ``c``."""
    if c <= 0:
        raise ValueError("clip norm must be positive")
    norm = global_norm(grads)
    scale = 1.0 if norm <= c else c / norm
    if isinstance(grads, Mapping):
        return {k: g * scale for k, g in grads.items()}
    return np.asarray(grads, dtype=float) * scale


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def finite_difference_check(
    f: Callable[[Params], float],
    params,
    analytic,
    epsilon: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between ``analytic`` and central differences of ``f``.

    ``params``/``analytic`` are either arrays or dicts of arrays with equal
    keys.  The error per coordinate is
    ``|analytic - numeric| / max(1, |analytic|)``.  With ``max_coords`` set,
    only that many coordinates per tensor are probed (picked by ``rng``).
    """
    single = not isinstance(params, Mapping)
    if single:
        params, analytic = {"x": params}, {"x": analytic}
        fn = lambda p: f(p["x"])  # noqa: E731
    else:
        fn = f
    work = {k: np.array(v, dtype=float, copy=True) for k, v in params.items()}
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for k, arr in work.items():
        flat = arr.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = rng.choice(flat.size, size=max_coords, replace=False)
        ga = np.asarray(analytic[k], dtype=float).reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + epsilon
            fp = fn(work)
            flat[i] = orig - epsilon
            fm = fn(work)
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise FloatingPointError(f"non-finite objective while probing '{k}'[{i}]")
            num = (fp - fm) / (2.0 * epsilon)
            err = abs(ga[i] - num) / max(1.0, abs(ga[i]))
            worst = max(worst, err)
    return worst


def param_count(params: Mapping[str, np.ndarray]) -> int:
    return int(sum(a.size for a in params.values()))
