import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from weakftm import numkit as nk

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


# softmax ------------------------------------------------------------------


def test_softmax_symmetric_pair():
    np.testing.assert_array_equal(nk.softmax(np.array([0.0, 0.0])), [0.5, 0.5])


def test_softmax_matches_direct_formula(rng):
    for _ in range(10):
        v = rng.normal(size=5)
        direct = np.exp(v) / np.exp(v).sum()
        np.testing.assert_allclose(nk.softmax(v), direct, rtol=0, atol=1e-12)


def test_softmax_empty_raises():
    with pytest.raises(ValueError):
        nk.softmax(np.array([]))


@given(arrays(np.float64, st.integers(1, 12), elements=finite), finite)
def test_softmax_is_distribution_and_shift_invariant(v, c):
    p = nk.softmax(v)
    assert (p >= 0).all()
    assert abs(p.sum() - 1.0) <= 1e-12
    np.testing.assert_allclose(nk.softmax(v + c), p, atol=1e-12)


def test_softmax_huge_inputs_stay_finite():
    p = nk.softmax(np.array([1e300, 0.0, -1e300]))
    assert np.isfinite(p).all() and p[0] == 1.0


# layer norm ---------------------------------------------------------------


def test_layer_norm_constant_input_is_zero():
    out = nk.layer_norm(np.full(6, 3.7), np.ones(6), np.zeros(6))
    np.testing.assert_allclose(out, 0.0, atol=1e-12)


def test_layer_norm_unit_pair():
    np.testing.assert_allclose(nk.layer_norm([1.0, -1.0], [1, 1], [0, 0], eps=1e-15), [1.0, -1.0], atol=1e-7)


def test_layer_norm_against_statistics(rng):
    for _ in range(10):
        x, g, b = rng.normal(size=9), rng.normal(size=9), rng.normal(size=9)
        mean = sum(x) / len(x)
        var = sum((xi - mean) ** 2 for xi in x) / len(x)
        expect = [gi * (xi - mean) / math.sqrt(var + 1e-5) + bi for xi, gi, bi in zip(x, g, b)]
        np.testing.assert_allclose(nk.layer_norm(x, g, b), expect, atol=1e-12)


def test_layer_norm_length_mismatch():
    with pytest.raises(ValueError):
        nk.layer_norm(np.ones(3), np.ones(4), np.zeros(3))


# attention ----------------------------------------------------------------


def _attn(rng, d=6, heads=2):
    return nk.init_attention(rng, d)


def test_attention_single_frame_is_value_projection(rng):
    p = _attn(rng)
    x = rng.normal(size=(1, 6))
    out = nk.multi_head_self_attention(x, p, np.ones(1, bool), 2)
    np.testing.assert_allclose(out, (x @ p["wv"] + p["bv"]) @ p["wo"] + p["bo"], atol=1e-12)


def test_attention_identical_rows_give_identical_outputs(rng):
    p = _attn(rng)
    x = np.tile(rng.normal(size=(1, 6)), (5, 1))
    out = nk.multi_head_self_attention(x, p, np.ones(5, bool), 2)
    np.testing.assert_allclose(out, np.tile(out[:1], (5, 1)), atol=1e-12)


def test_attention_weights_zero_on_masked_keys(rng):
    p = _attn(rng)
    x = rng.normal(size=(1, 5, 6))
    mask = np.array([[True, False, True, True, False]])
    _, cache = nk.mhsa_fwd(x, p, mask, 2)
    attn = cache[4]
    assert (attn[..., ~mask[0]] == 0).all()
    np.testing.assert_allclose(attn.sum(-1), 1.0, atol=1e-12)


def test_attention_ignores_values_at_masked_positions(rng):
    p = _attn(rng)
    x = rng.normal(size=(1, 5, 6))
    mask = np.array([[True, True, False, True, False]])
    y = x.copy()
    y[0, ~mask[0]] = rng.normal(size=(2, 6)) * 100
    a = nk.multi_head_self_attention(x, p, mask, 2)
    b = nk.multi_head_self_attention(y, p, mask, 2)
    np.testing.assert_allclose(a[mask], b[mask], atol=1e-12)


def test_attention_all_masked_raises(rng):
    with pytest.raises(ValueError):
        nk.multi_head_self_attention(rng.normal(size=(3, 6)), _attn(rng), np.zeros(3, bool), 2)


def test_attention_gradients_finite_difference():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        p = nk.init_attention(rng, 4)
        x = rng.normal(size=(2, 3, 4))
        mask = np.array([[True, True, True], [True, True, False]])
        w = rng.normal(size=(2, 3, 4))

        def f(pp):
            out, _ = nk.mhsa_fwd(pp["x"], {k: pp[k] for k in nk.ATTENTION_KEYS}, mask, 2)
            return float((out * w * mask[..., None]).sum())

        out, cache = nk.mhsa_fwd(x, p, mask, 2)
        dx, g = nk.mhsa_bwd(w * mask[..., None], p, cache)
        g["x"] = dx
        assert nk.finite_difference_check(f, dict(p, x=x), g) < 1e-4


# GRU ----------------------------------------------------------------------


def _sig(x):
    return 1.0 / (1.0 + math.exp(-x))


def test_gru_closed_update_gate_keeps_state(rng):
    p = nk.init_gru(rng, 3, 4)
    p["gru_b"][:4] = -1e3
    h = rng.normal(size=4)
    np.testing.assert_allclose(nk.gru_step(h, rng.normal(size=3), p), h, atol=1e-12)


def test_gru_all_zero():
    p = {"gru_w": np.zeros((3, 12)), "gru_u": np.zeros((4, 12)), "gru_b": np.zeros(12)}
    np.testing.assert_array_equal(nk.gru_step(np.zeros(4), np.zeros(3), p), np.zeros(4))


def test_gru_step_against_gate_equations(rng):
    hd, xd = 3, 2
    for _ in range(10):
        p = nk.init_gru(rng, xd, hd)
        h, x = rng.normal(size=hd), rng.normal(size=xd)
        w, u, b = p["gru_w"], p["gru_u"], p["gru_b"]
        expect = []
        for j in range(hd):
            def pre(gate, vec):
                col = gate * hd + j
                return sum(x[i] * w[i, col] for i in range(xd)) + b[col] + sum(vec[i] * u[i, col] for i in range(hd))

            z = _sig(pre(0, h))
            r_all = [_sig(sum(x[i] * w[i, hd + k] for i in range(xd)) + b[hd + k] + sum(h[i] * u[i, hd + k] for i in range(hd))) for k in range(hd)]
            rh = [r_all[k] * h[k] for k in range(hd)]
            cand = math.tanh(pre(2, rh))
            expect.append((1 - z) * h[j] + z * cand)
        np.testing.assert_allclose(nk.gru_step(h, x, p), expect, atol=1e-12)


def test_gru_dim_mismatch(rng):
    with pytest.raises(ValueError):
        nk.gru_step(np.zeros(5), np.zeros(3), nk.init_gru(rng, 3, 4))


def test_gru_gradients_finite_difference():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        p = nk.init_gru(rng, 3, 4)
        h, x = rng.normal(size=(5, 4)), rng.normal(size=(5, 3))
        w = rng.normal(size=(5, 4))

        def f(pp):
            return float((nk.gru_fwd(pp["h"], pp["x"], pp)[0] * w).sum())

        _, cache = nk.gru_fwd(h, x, p)
        dh, dx, g = nk.gru_bwd(w, p, cache)
        g.update(h=dh, x=dx)
        assert nk.finite_difference_check(f, dict(p, h=h, x=x), g) < 1e-4


# other layers -------------------------------------------------------------


def test_layer_norm_and_linear_gradients_finite_difference():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        x, g, b = rng.normal(size=(3, 5)), rng.normal(size=5), rng.normal(size=5)
        wl, bl = rng.normal(size=(5, 2)), rng.normal(size=2)
        w = rng.normal(size=(3, 2))

        def f(pp):
            y, _ = nk.layer_norm_fwd(pp["x"], pp["g"], pp["b"])
            r, _ = nk.relu_fwd(y @ pp["wl"] + pp["bl"])
            return float((r * w).sum())

        y, c = nk.layer_norm_fwd(x, g, b)
        z = y @ wl + bl
        r, pos = nk.relu_fwd(z)
        dz = nk.relu_bwd(w, pos)
        dy, dwl, dbl = nk.linear_bwd(dz, y, wl)
        dx, dg, db = nk.layer_norm_bwd(dy, c)
        params = dict(x=x, g=g, b=b, wl=wl, bl=bl)
        grads = dict(x=dx, g=dg, b=db, wl=dwl, bl=dbl)
        assert nk.finite_difference_check(f, params, grads) < 1e-4


def test_softmax_gradient_finite_difference():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        v, w = rng.normal(size=(2, 4)), rng.normal(size=(2, 4))
        p = nk.softmax(v, axis=1)
        dv = nk.softmax_backward(p, w, axis=1)
        assert nk.finite_difference_check(lambda a: float((nk.softmax(a, axis=1) * w).sum()), v, dv) < 1e-4


def test_dropout_identity_without_rng(rng):
    x = rng.normal(size=(4, 4))
    y, keep = nk.dropout_fwd(x, 0.5, None)
    assert y is x and keep is None


def test_dropout_preserves_expectation():
    x = np.ones(200_000)
    y, _ = nk.dropout_fwd(x, 0.3, np.random.default_rng(0))
    assert abs(y.mean() - 1.0) < 0.01
    assert set(np.unique(y)) <= {0.0, 1.0 / 0.7}


# Adam and clipping ----------------------------------------------------------


def test_adam_first_step_closed_form(rng):
    p = {"w": rng.normal(size=5)}
    g = {"w": rng.normal(size=5)}
    st0 = nk.AdamState.for_params(p, lr=0.01)
    new, st1 = nk.adam_step(p, g, st0)
    np.testing.assert_allclose(new["w"] - p["w"], -0.01 * g["w"] / (np.abs(g["w"]) + 1e-8), atol=1e-15)
    assert st1.step == 1 and st0.step == 0


def test_adam_zero_gradient_no_change(rng):
    p = {"w": rng.normal(size=5)}
    new, _ = nk.adam_step(p, {"w": np.zeros(5)}, nk.AdamState.for_params(p))
    np.testing.assert_array_equal(new["w"], p["w"])


def test_adam_two_steps_hand_recursion():
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    theta, g1, g2 = 1.5, 0.4, -0.7
    m1, v1 = (1 - b1) * g1, (1 - b2) * g1 * g1
    t1 = theta - lr * (m1 / (1 - b1)) / (math.sqrt(v1 / (1 - b2)) + eps)
    m2, v2 = b1 * m1 + (1 - b1) * g2, b2 * v1 + (1 - b2) * g2 * g2
    t2 = t1 - lr * (m2 / (1 - b1**2)) / (math.sqrt(v2 / (1 - b2**2)) + eps)
    p = {"w": np.array([theta])}
    s = nk.AdamState.for_params(p, lr=lr)
    p, s = nk.adam_step(p, {"w": np.array([g1])}, s)
    p, s = nk.adam_step(p, {"w": np.array([g2])}, s)
    assert p["w"][0] == pytest.approx(t2, abs=1e-14)
    assert (s.v["w"] >= 0).all()


def test_adam_rejects_non_finite(rng):
    p = {"w": np.zeros(2)}
    with pytest.raises(FloatingPointError):
        nk.adam_step(p, {"w": np.array([np.nan, 0.0])}, nk.AdamState.for_params(p))


def test_adam_is_pure(rng):
    p = {"w": rng.normal(size=3)}
    g = {"w": rng.normal(size=3)}
    s = nk.AdamState.for_params(p)
    before = (p["w"].copy(), g["w"].copy(), s.m["w"].copy())
    a = nk.adam_step(p, g, s)
    b = nk.adam_step(p, g, s)
    np.testing.assert_array_equal(a[0]["w"], b[0]["w"])
    for x, y in zip(before, (p["w"], g["w"], s.m["w"])):
        np.testing.assert_array_equal(x, y)


def test_clip_boundary_and_scale():
    np.testing.assert_array_equal(nk.clip_global_norm(np.array([3.0, 4.0]), 5.0), [3.0, 4.0])
    np.testing.assert_allclose(nk.clip_global_norm(np.array([6.0, 8.0]), 5.0), [3.0, 4.0], atol=1e-15)


@settings(max_examples=200)
@given(
    st.dictionaries(
        st.sampled_from("abc"), arrays(np.float64, st.integers(1, 5), elements=st.floats(-1e6, 1e6)), min_size=1
    ),
    st.floats(1e-3, 1e3),
)
def test_clip_norm_bound(grads, c):
    out = nk.clip_global_norm(grads, c)
    assert nk.global_norm(out) <= c + 1e-12 * max(1.0, c) + 1e-12
    if nk.global_norm(grads) <= c:
        for k in grads:
            np.testing.assert_array_equal(out[k], grads[k])


# finite-difference checker --------------------------------------------------


def test_fd_check_quadratic(rng):
    a = rng.normal(size=(4, 4))
    a = a @ a.T
    x = rng.normal(size=4)
    assert nk.finite_difference_check(lambda v: float(v @ a @ v), x, 2 * a @ x) < 1e-9


def _softmax_bce(w, x, y):
    p = nk.softmax(x @ w, axis=1)[:, 1]
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))


def test_fd_check_softmax_bce_and_detects_bugs(rng):
    x, w = rng.normal(size=(6, 3)), rng.normal(size=(3, 2))
    y = np.array([1, 0, 1, 1, 0, 0])
    p = nk.softmax(x @ w, axis=1)
    dlogits = p.copy()
    dlogits[:, 1] -= y
    dlogits[:, 0] -= 1 - y
    grad = x.T @ dlogits / len(y)
    assert nk.finite_difference_check(lambda v: _softmax_bce(v, x, y), w, grad) < 1e-4
    bad = grad.copy()
    bad[1, 0] += 0.05
    assert nk.finite_difference_check(lambda v: _softmax_bce(v, x, y), w, bad) > 1e-2


def test_fd_check_non_finite_raises():
    with pytest.raises(FloatingPointError), np.errstate(invalid="ignore", divide="ignore"):
        nk.finite_difference_check(lambda v: float(np.log(v[0])), np.array([0.0]), np.array([1.0]))
