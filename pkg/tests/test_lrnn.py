import numpy as np
import pytest
from sklearn.base import clone

from weakftm import numkit as nk
from weakftm.corpus import CorpusConfig, Lattice, generate_corpus, labels_of
from weakftm.evalkit import equal_error_rate
from weakftm.lrnn import (
    LatticeRNNClassifier,
    LrnnConfig,
    init_lrnn_params,
    lattice_embed,
    lrnn_backward,
    lrnn_forward,
    lrnn_param_count,
    lrnn_score,
    pack,
    prepare_lattice,
    embed_fwd,
)
from weakftm.params_io import ParamFileError
from weakftm.train import bce_loss_grad

from conftest import chain_lattice, random_lattices


def test_init_deterministic_per_seed():
    a, b = init_lrnn_params(LrnnConfig(), 3), init_lrnn_params(LrnnConfig(), 3)
    assert a.keys() == b.keys()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    c = init_lrnn_params(LrnnConfig(), 4)
    assert not np.array_equal(a["gru_w"], c["gru_w"])


def test_init_range():
    p = init_lrnn_params(LrnnConfig(), 0)
    fan_in = LrnnConfig().input_dim
    assert np.abs(p["gru_w"]).max() <= 1 / np.sqrt(fan_in)


def test_param_count_band_and_closed_form():
    cfg = LrnnConfig()
    v, e, h = cfg.vocab_size, cfg.word_embedding_dim, cfg.hidden_dim
    by_hand = v * e + (e + 3) * 3 * h + h * 3 * h + 3 * h + h * 2 + 2
    assert lrnn_param_count(cfg) == by_hand == nk.param_count(init_lrnn_params(cfg))
    assert 3_000 <= by_hand <= 10_000


def test_embedding_dimension():
    lat = random_lattices(1)[0]
    assert lattice_embed(lat, init_lrnn_params(LrnnConfig())).shape == (16,)


def test_chain_equals_plain_gru():
    p = init_lrnn_params(LrnnConfig(), 1)
    words, am, lm = [3, 7, 1, 60], [-0.5, -1.0, -0.1, -2.0], [-3.0, -4.0, -3.5, -4.2]
    lat = chain_lattice(words, am, lm)
    h = np.zeros(16)
    for w, a, l in zip(words, am, lm):
        h = nk.gru_step(h, np.concatenate([p["embedding"][w], [1.0, a, l]]), p)
    np.testing.assert_allclose(lattice_embed(lat, p), h, atol=1e-14)


def _permuted(lat, perm):
    return Lattice(
        lat.n_nodes, lat.src[perm], lat.dst[perm], lat.word[perm], lat.am_score[perm], lat.lm_score[perm], lat.posterior[perm]
    )


def test_arc_order_invariance_is_bitwise():
    p = init_lrnn_params(LrnnConfig(), 2)
    for i, lat in enumerate(random_lattices(10, seed=5)):
        perm = np.random.default_rng(i).permutation(lat.n_arcs)
        assert np.array_equal(lattice_embed(lat, p), lattice_embed(_permuted(lat, perm), p))


def _two_branch(a, b):
    # start -> a -> end and start -> b -> end; a and b are incomparable
    return Lattice(
        4,
        src=[0, 0, a, b],
        dst=[a, b, 3, 3],
        word=[4, 9, 5, 8],
        am_score=[-0.4, -0.9, -0.5, -0.8],
        lm_score=[-1.04, -1.09, -1.05, -1.08],
        posterior=[0.7, 0.3, 1.0, 1.0],
    )


def test_relabeling_preserving_topology():
    p = init_lrnn_params(LrnnConfig(), 6)
    np.testing.assert_allclose(lattice_embed(_two_branch(1, 2), p), lattice_embed(_two_branch(2, 1), p), atol=1e-14)


def test_pooling_against_hand_computation():
    p = init_lrnn_params(LrnnConfig(), 6)
    # start -> a (0.7), start -> b (0.3), a -> b (0.4), a -> end (0.6), b -> end (1.0)
    lat = Lattice(
        4,
        src=[0, 0, 1, 1, 2],
        dst=[1, 2, 2, 3, 3],
        word=[4, 9, 2, 5, 8],
        am_score=[-0.4, -0.9, -0.2, -0.5, -0.8],
        lm_score=[-1.04, -1.09, -1.02, -1.05, -1.08],
        posterior=[0.7, 0.3, 0.4, 0.6, 1.0],
    )
    lat.validate()

    def step(h, w, post, am, lm):
        return nk.gru_step(h, np.concatenate([p["embedding"][w], [post, am, lm]]), p)

    h0 = np.zeros(16)
    ha = step(h0, 4, 0.7, -0.4, -1.04)
    hb = (0.3 * step(h0, 9, 0.3, -0.9, -1.09) + 0.4 * step(ha, 2, 0.4, -0.2, -1.02)) / 0.7
    he = (0.6 * step(ha, 5, 0.6, -0.5, -1.05) + 1.0 * step(hb, 8, 1.0, -0.8, -1.08)) / 1.6
    np.testing.assert_allclose(lattice_embed(lat, p), he, atol=1e-13)


def test_renormalization_invariance():
    p = init_lrnn_params(LrnnConfig(), 4)
    lat = random_lattices(1, seed=12)[0]
    prep = prepare_lattice(lat)
    ref = embed_fwd(pack([prep]), p)[0]
    # rescale the raw incoming weights of every node by an arbitrary factor, then renormalize
    rng = np.random.default_rng(0)
    raw = prep.scalars[:, 0] * rng.uniform(0.1, 10.0, size=lat.n_nodes)[prep.dst]
    prep.weight = raw / np.bincount(prep.dst, weights=raw, minlength=lat.n_nodes)[prep.dst]
    np.testing.assert_allclose(embed_fwd(pack([prep]), p)[0], ref, atol=1e-12)


def test_batched_equals_single():
    p = init_lrnn_params(LrnnConfig(), 0)
    lats = random_lattices(7, seed=1)
    batch = lrnn_forward(pack([prepare_lattice(l) for l in lats]), p)[0]
    np.testing.assert_allclose(batch, [lrnn_score(l, p) for l in lats], atol=1e-14)


def test_score_is_probability():
    est = LatticeRNNClassifier(max_epochs=1)
    lats = random_lattices(6)
    est.fit(lats, [0, 1] * 3)
    proba = est.predict_proba(lats)
    np.testing.assert_allclose(proba.sum(1), 1.0, atol=1e-12)
    assert ((proba >= 0) & (proba <= 1)).all()


def test_untrained_scores_chance_when_labels_are_independent():
    recs = generate_corpus(CorpusConfig(n_utterances=2000, min_frames=1, max_frames=1))
    y = np.random.default_rng(0).permutation(np.repeat([0, 1], 1000))
    batch = pack([prepare_lattice(r.lattice) for r in recs])
    for seed in range(3):
        s = lrnn_forward(batch, init_lrnn_params(LrnnConfig(), seed))[0]
        assert 0.4 <= equal_error_rate(s, y) <= 0.6


def test_invalid_lattice_rejected():
    bad = chain_lattice([1, 2], [0.0, 0.0], [0.0, 0.0])
    bad.posterior = np.array([0.5, 1.0])
    with pytest.raises(ValueError):
        lrnn_score(bad, init_lrnn_params(LrnnConfig()))
    with pytest.raises(ValueError):
        lrnn_score(chain_lattice([99], [0.0], [0.0]), init_lrnn_params(LrnnConfig()))


def test_gradients_finite_difference():
    cfg = LrnnConfig(word_embedding_dim=4, hidden_dim=3, vocab_size=64)
    for seed in range(10):
        p = init_lrnn_params(cfg, seed)
        lats = random_lattices(3, seed=seed)
        y = np.array([1, 0, 1])
        b = pack([prepare_lattice(l) for l in lats])

        def f(pp):
            return bce_loss_grad(lrnn_forward(b, pp)[0], y)[0]

        prob, _, cache = lrnn_forward(b, p)
        grads = lrnn_backward(bce_loss_grad(prob, y)[1], p, cache)
        assert nk.finite_difference_check(f, p, grads) < 1e-4


def test_estimator_api_and_persistence(tmp_path):
    recs = generate_corpus(CorpusConfig(n_utterances=120, min_frames=1, max_frames=1, seed=2))
    X, y = [r.lattice for r in recs], labels_of(recs)
    est = LatticeRNNClassifier(max_epochs=3, random_state=5)
    assert clone(est).get_params() == est.get_params()
    est.fit(X[:80], y[:80], X[80:], y[80:])
    assert len(est.history_) == 3 and all(h["dev_eer"] is not None for h in est.history_)
    again = LatticeRNNClassifier(max_epochs=3, random_state=5).fit(X[:80], y[:80], X[80:], y[80:])
    assert est.history_ == again.history_
    assert est.predict(X).shape == (120,)
    assert est.embed(X).shape == (120, 16)
    est.save(tmp_path / "m.params")
    loaded = LatticeRNNClassifier.load(tmp_path / "m.params")
    np.testing.assert_array_equal(loaded.decision_function(X), est.decision_function(X))
    with pytest.raises(ParamFileError):
        from weakftm.aftm import AcousticFTMClassifier

        AcousticFTMClassifier.load(tmp_path / "m.params")


def test_predict_before_fit():
    from sklearn.exceptions import NotFittedError

    with pytest.raises(NotFittedError):
        LatticeRNNClassifier().predict(random_lattices(1))
