import dataclasses
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from weakftm.corpus import (
    CorpusConfig,
    CorpusFormatError,
    FeatureSequence,
    Intent,
    Label,
    Lattice,
    PROFILES,
    generate_corpus,
    intent_correct_prob,
    labels_of,
    profile_config,
    read_corpus,
    read_corpus_header,
    sample_snr,
    simulate_intent_classifier,
    synth_feature_components,
    synth_features,
    synth_lattice,
    write_corpus,
)


def _records_equal(a, b):
    assert len(a) == len(b)
    for x, y in zip(a, b):
        for f in dataclasses.fields(x):
            assert getattr(x, f.name) == getattr(y, f.name), f.name


# SNR ----------------------------------------------------------------------


@pytest.mark.parametrize("label,target", [(Label.INTENDED, 20.0), (Label.UNINTENDED, 0.0)])
def test_snr_class_means(label, target):
    rng = np.random.default_rng(7)
    draws = [sample_snr(label, CorpusConfig(), rng) for _ in range(10_000)]
    assert abs(np.mean(draws) - target) <= 0.3


def test_snr_clipped_and_deterministic():
    cfg = CorpusConfig(snr_std_intended=40.0)
    a = [sample_snr(Label.INTENDED, cfg, np.random.default_rng(3)) for _ in range(3)]
    rng = np.random.default_rng(5)
    draws = np.array([sample_snr(Label.INTENDED, cfg, rng) for _ in range(2000)])
    assert draws.min() >= -10.0 and draws.max() <= 40.0
    assert a == [sample_snr(Label.INTENDED, cfg, np.random.default_rng(3)) for _ in range(3)]


@pytest.mark.parametrize("profile", sorted(PROFILES))
def test_snr_classes_overlap_in_band(profile):
    recs = generate_corpus(profile_config(profile, n_utterances=1500, min_frames=3, max_frames=3))
    for label in Label:
        snrs = np.array([r.snr_db for r in recs if r.true_label is label])
        assert ((snrs > 5) & (snrs < 15)).any()


# features -----------------------------------------------------------------


def test_feature_shape_and_dtype():
    f = synth_features(Label.INTENDED, 10.0, 17, np.random.default_rng(0))
    assert f.frames.shape == (17, 40)
    assert f.frames.dtype == np.float32
    assert f.frame_rate_hz == 100.0


@settings(max_examples=40, deadline=None)
@given(st.sampled_from(list(Label)), st.floats(-10, 40), st.integers(1, 120), st.integers(0, 2**32 - 1))
def test_feature_components_hit_requested_snr(label, snr, n, seed):
    s, noise = synth_feature_components(label, snr, n, np.random.default_rng(seed))
    measured = 10 * np.log10(np.mean(s**2) / np.mean(noise**2))
    assert abs(measured - snr) <= 1.0
    assert np.isfinite(s).all() and np.isfinite(noise).all()


def test_high_snr_frames_track_clean_signal():
    corrs = []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        label = Label.INTENDED if seed % 2 else Label.UNINTENDED
        s, _ = synth_feature_components(label, 40.0, 80, np.random.default_rng(seed))
        f = synth_features(label, 40.0, 80, rng).frames.astype(float)
        corrs.append(np.corrcoef(f.ravel(), s.ravel())[0, 1])
    assert min(corrs) > 0.99


def test_feature_sequence_rejects_empty():
    with pytest.raises(ValueError):
        FeatureSequence(np.zeros((0, 40)))


# lattices -----------------------------------------------------------------


@settings(max_examples=100, deadline=None)
@given(st.sampled_from(list(Label)), st.floats(-10, 40), st.integers(0, 2**32 - 1))
def test_generated_lattices_are_valid(label, snr, seed):
    lat = synth_lattice(label, snr, np.random.default_rng(seed))
    lat.validate()
    assert lat.src.min() == 0 and lat.dst.max() == lat.n_nodes - 1
    # softmax of am + lm over each node reproduces the posteriors
    tot = lat.am_score + lat.lm_score
    for node in np.unique(lat.src):
        sel = lat.src == node
        e = np.exp(tot[sel] - tot[sel].max())
        np.testing.assert_allclose(e / e.sum(), lat.posterior[sel], atol=1e-9)


def test_unintended_lattices_have_higher_entropy():
    def mean_entropy(label):
        return np.mean(
            [synth_lattice(label, 10.0, np.random.default_rng([i, 9])).node_entropies().mean() for i in range(1000)]
        )

    assert mean_entropy(Label.UNINTENDED) > mean_entropy(Label.INTENDED)


def test_intended_high_snr_best_path_mass():
    bp = [synth_lattice(Label.INTENDED, 20.0, np.random.default_rng([i, 4])).best_path_posterior() for i in range(1000)]
    assert np.mean(bp) >= 0.8


def _lattice(**kw):
    base = dict(
        n_nodes=3,
        src=[0, 0, 1],
        dst=[1, 2, 2],
        word=[1, 2, 3],
        am_score=[0.0, 0.0, 0.0],
        lm_score=[0.0, 0.0, 0.0],
        posterior=[0.6, 0.4, 1.0],
    )
    base.update(kw)
    return Lattice(**base)


def test_lattice_validation_errors():
    _lattice().validate()
    with pytest.raises(ValueError, match="sum to 1"):
        _lattice(posterior=[0.6, 0.3, 1.0]).validate()
    with pytest.raises(ValueError):
        _lattice(src=[0, 2, 1], dst=[1, 1, 2]).validate()
    with pytest.raises(ValueError, match="path"):
        _lattice(n_nodes=4).validate()
    with pytest.raises(ValueError):
        _lattice(posterior=[1.2, -0.2, 1.0]).validate()


# intent classifier ----------------------------------------------------------


@pytest.mark.parametrize("profile", ["default", "dev", "test"])
def test_intent_classifier_reliable_at_high_snr(profile):
    assert intent_correct_prob(Label.INTENDED, 30.0, profile_config(profile)) >= 0.98


def test_intent_classifier_deterministic():
    a = [simulate_intent_classifier(Label.UNINTENDED, 0.0, np.random.default_rng(s)) for s in range(20)]
    b = [simulate_intent_classifier(Label.UNINTENDED, 0.0, np.random.default_rng(s)) for s in range(20)]
    assert a == b and set(a) <= set(Intent)


# corpus generation ------------------------------------------------------------


def test_generate_counts_and_prior():
    recs = generate_corpus(CorpusConfig(n_utterances=1000, min_frames=2, max_frames=4))
    assert len(recs) == 1000
    assert len({r.id for r in recs}) == 1000
    assert abs(labels_of(recs).sum() - 500) <= 3 * np.sqrt(1000 * 0.25)


def test_generation_order_independent():
    cfg = CorpusConfig(n_utterances=30, min_frames=2, max_frames=6, seed=11)
    serial = generate_corpus(cfg)
    pieces = generate_corpus(cfg, range(15, 30)) + generate_corpus(cfg, range(15))
    pieces.sort(key=lambda r: r.id)
    _records_equal(serial, pieces)
    _records_equal(serial, generate_corpus(cfg))


def test_invalid_config_rejected():
    with pytest.raises(ValueError):
        generate_corpus(CorpusConfig(class_prior=1.5))
    with pytest.raises(ValueError):
        generate_corpus(CorpusConfig(min_frames=10, max_frames=5))
    with pytest.raises(ValueError):
        profile_config("nope")


def test_config_dict_round_trip():
    cfg = profile_config("test", n_utterances=3)
    assert CorpusConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    with pytest.raises(ValueError):
        CorpusConfig.from_dict({"bogus": 1})


# serialization -----------------------------------------------------------------


def test_round_trip_bit_exact(tmp_path):
    recs = generate_corpus(CorpusConfig(n_utterances=25, min_frames=1, max_frames=9, seed=3))
    path = tmp_path / "c.jsonl"
    write_corpus(path, recs, meta={"note": "x"})
    back = read_corpus(path)
    _records_equal(recs, back)
    assert read_corpus_header(path)["meta"] == {"note": "x"}
    path2 = tmp_path / "d.jsonl"
    write_corpus(path2, back, meta={"note": "x"})
    assert path.read_bytes() == path2.read_bytes()


def test_empty_corpus_round_trip(tmp_path):
    write_corpus(tmp_path / "e.jsonl", [])
    assert read_corpus(tmp_path / "e.jsonl") == []


def test_truncated_file_rejected(tmp_path):
    recs = generate_corpus(CorpusConfig(n_utterances=5, min_frames=2, max_frames=3))
    path = tmp_path / "c.jsonl"
    write_corpus(path, recs)
    data = path.read_text()
    (tmp_path / "cut.jsonl").write_text(data[: len(data) - 40])
    with pytest.raises(CorpusFormatError, match="line 6"):
        read_corpus(tmp_path / "cut.jsonl")
    lines = data.splitlines(keepends=True)
    (tmp_path / "short.jsonl").write_text("".join(lines[:-1]))
    with pytest.raises(CorpusFormatError, match="expected 5 records"):
        read_corpus(tmp_path / "short.jsonl")


def test_malformed_line_named(tmp_path):
    recs = generate_corpus(CorpusConfig(n_utterances=3, min_frames=2, max_frames=3))
    path = tmp_path / "c.jsonl"
    write_corpus(path, recs)
    lines = path.read_text().splitlines(keepends=True)
    lines[2] = '{"id": "x"}\n'
    path.write_text("".join(lines))
    with pytest.raises(CorpusFormatError, match="line 3"):
        read_corpus(path)
    path.write_text("not json\n")
    with pytest.raises(CorpusFormatError, match="line 1"):
        read_corpus(path)
