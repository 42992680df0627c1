"""Synthetic labeled corpus: SNR, acoustic frames, ASR-style lattices and a
simulated text-intent classifier, plus a line-delimited JSON file format.

Every utterance draws from its own RNG stream keyed by
``(seed, split, index)`` so corpora are identical whether generated serially,
in parallel, or in pieces.
"""

from __future__ import annotations

import base64
import dataclasses
import enum
import json
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.signal import lfilter

from .numkit import sigmoid

SCHEMA = "weakftm.corpus"
SCHEMA_VERSION = 1
N_FEAT = 40
FRAME_RATE_HZ = 100.0


class Label(str, enum.Enum):
    INTENDED = "intended"
    UNINTENDED = "unintended"

    @property
    def y(self) -> int:
        return int(self is Label.INTENDED)


class Intent(str, enum.Enum):
    BACKGROUND = "background"
    NOT_BACKGROUND = "not_background"


class WeakLabel(str, enum.Enum):
    INTENDED = "intended"
    UNINTENDED = "unintended"
    DISCARDED = "discarded"


class CorpusFormatError(ValueError):
    """Raised for unreadable corpus files; the message names the line."""


# ---------------------------------------------------------------------------
# data types
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class Lattice:
    """Word-hypothesis DAG. Node 0 is the start, ``n_nodes - 1`` the end.

    Arcs are stored column-wise.  ``am_score`` and ``lm_score`` are log
    probabilities whose sum, softmaxed over the arcs leaving a node, gives
    ``posterior``.
    """

    n_nodes: int
    src: np.ndarray
    dst: np.ndarray
    word: np.ndarray
    am_score: np.ndarray
    lm_score: np.ndarray
    posterior: np.ndarray

    def __post_init__(self):
        self.src = np.asarray(self.src, dtype=np.int64)
        self.dst = np.asarray(self.dst, dtype=np.int64)
        self.word = np.asarray(self.word, dtype=np.int64)
        self.am_score = np.asarray(self.am_score, dtype=float)
        self.lm_score = np.asarray(self.lm_score, dtype=float)
        self.posterior = np.asarray(self.posterior, dtype=float)

    @property
    def n_arcs(self) -> int:
        return int(self.src.size)

    @property
    def end(self) -> int:
        return self.n_nodes - 1

    def validate(self, tol: float = 1e-6) -> None:
        n = self.n_nodes
        if n < 2:
            raise ValueError("lattice needs at least two nodes")
        cols = (self.dst, self.word, self.am_score, self.lm_score, self.posterior)
        if any(c.shape != self.src.shape for c in cols) or self.src.ndim != 1:
            raise ValueError("lattice arc columns differ in length")
        if self.n_arcs == 0:
            raise ValueError("lattice has no arcs")
        if (self.src < 0).any() or (self.dst >= n).any() or (self.src >= self.dst).any():
            raise ValueError("arcs must satisfy 0 <= src < dst < n_nodes")
        if not np.all(np.isfinite(self.posterior)) or (self.posterior < 0).any() or (self.posterior > 1).any():
            raise ValueError("posteriors must lie in [0, 1]")
        if not (np.all(np.isfinite(self.am_score)) and np.all(np.isfinite(self.lm_score))):
            raise ValueError("arc scores must be finite")
        if (self.word < 0).any():
            raise ValueError("negative word id")
        fwd = np.zeros(n, dtype=bool)
        fwd[0] = True
        order = np.argsort(self.src, kind="stable")
        for a in order:
            if fwd[self.src[a]]:
                fwd[self.dst[a]] = True
        bwd = np.zeros(n, dtype=bool)
        bwd[n - 1] = True
        for a in order[::-1]:
            if bwd[self.dst[a]]:
                bwd[self.src[a]] = True
        if not (fwd.all() and bwd.all()):
            raise ValueError("every node must lie on a start-to-end path")
        out_mass = np.bincount(self.src, weights=self.posterior, minlength=n)[: n - 1]
        if np.abs(out_mass - 1.0).max() > tol:
            raise ValueError("outgoing posteriors of a node do not sum to 1")

    def canonical_order(self) -> np.ndarray:
        """Arc permutation that does not depend on storage order."""
        return np.lexsort(
            (self.lm_score, self.am_score, self.posterior, self.word, self.src, self.dst)
        )

    def node_entropies(self) -> np.ndarray:
        """Entropy (nats) of the outgoing posterior distribution of every non-end node."""
        p = np.clip(self.posterior, 1e-300, 1.0)
        h = np.bincount(self.src, weights=-self.posterior * np.log(p), minlength=self.n_nodes)
        return h[: self.n_nodes - 1]

    def best_path_posterior(self) -> float:
        """Product of posteriors along the Viterbi (max-product) path."""
        best = np.full(self.n_nodes, -np.inf)
        best[0] = 0.0
        logp = np.log(np.clip(self.posterior, 1e-300, 1.0))
        for a in np.argsort(self.src, kind="stable"):
            best[self.dst[a]] = max(best[self.dst[a]], best[self.src[a]] + logp[a])
        return float(np.exp(best[-1]))

    def __eq__(self, other):
        if not isinstance(other, Lattice):
            return NotImplemented
        return self.n_nodes == other.n_nodes and all(
            np.array_equal(getattr(self, f), getattr(other, f))
            for f in ("src", "dst", "word", "am_score", "lm_score", "posterior")
        )


@dataclass(eq=False)
class FeatureSequence:
    frames: np.ndarray
    frame_rate_hz: float = FRAME_RATE_HZ

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ValueError(f"features must be a non-empty (T, d) matrix, got {self.frames.shape}")

    def __len__(self) -> int:
        return self.frames.shape[0]

    def __eq__(self, other):
        if not isinstance(other, FeatureSequence):
            return NotImplemented
        return (
            self.frame_rate_hz == other.frame_rate_hz
            and self.frames.dtype == other.frames.dtype
            and np.array_equal(self.frames, other.frames)
        )


@dataclass
class UtteranceRecord:
    id: str
    true_label: Label
    snr_db: float
    features: FeatureSequence
    lattice: Lattice
    intent_output: Intent
    weak_label: WeakLabel | None = None


@dataclass
class CorpusConfig:
    """Generator settings. The SNR/intent defaults are the "dev" calibration
    except for the SNR spread, which defaults to 5 dB per class."""

    n_utterances: int = 1000
    class_prior: float = 0.5
    snr_mean_intended: float = 20.0
    snr_mean_unintended: float = 0.0
    snr_std_intended: float = 5.0
    snr_std_unintended: float = 5.0
    snr_clip: tuple[float, float] = (-10.0, 40.0)
    min_frames: int = 50
    max_frames: int = 300
    # acoustics
    class_offset: float = 0.14
    signal_std: float = 0.6
    ar_coef_intended: float = 0.9
    ar_coef_unintended: float = 0.85
    noise_tilt: float = 1.0
    # lattices
    vocab_size: int = 64
    min_words: int = 2
    max_words: int = 7
    max_branch: int = 5
    confusion_bias_intended: float = -2.5
    confusion_bias_unintended: float = 1.0
    confusion_snr_slope: float = 0.5
    confusion_noise: float = 1.0
    top_arc_sharpness: float = 20.0
    command_word_prob: float = 0.6
    skip_arc_prob: float = 0.3
    # intent classifier: P(correct | class, snr) = sigmoid(a + b * snr)
    intent_intended: tuple[float, float] = (-2.55, 0.23)
    intent_unintended: tuple[float, float] = (1.1, 0.0)
    seed: int = 0
    split: str = "utt"
    profile: str = "default"

    def validate(self) -> None:
        if self.n_utterances < 0:
            raise ValueError("n_utterances must be non-negative")
        if not 0.0 <= self.class_prior <= 1.0:
            raise ValueError("class_prior must be a probability")
        if min(self.snr_std_intended, self.snr_std_unintended) <= 0:
            raise ValueError("SNR standard deviations must be positive")
        if self.snr_clip[0] >= self.snr_clip[1]:
            raise ValueError("snr_clip must be an increasing pair")
        if not 1 <= self.min_frames <= self.max_frames:
            raise ValueError("need 1 <= min_frames <= max_frames")
        if not 1 <= self.min_words <= self.max_words:
            raise ValueError("need 1 <= min_words <= max_words")
        if self.max_branch < 1 or self.vocab_size < 2:
            raise ValueError("max_branch >= 1 and vocab_size >= 2 required")
        for name in ("command_word_prob", "skip_arc_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be a probability")
        for name in ("ar_coef_intended", "ar_coef_unintended"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in [0, 1)")
        if self.signal_std <= 0:
            raise ValueError("signal_std must be positive")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusConfig":
        d = dict(d)
        for k in ("snr_clip", "intent_intended", "intent_unintended"):
            if k in d:
                d[k] = tuple(d[k])
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown corpus config keys: {sorted(unknown)}")
        return cls(**d)


# Calibrations solved offline against the weak-labeling targets by
# integrating the clipped-normal SNR law against the intent logistic.
PROFILES: dict[str, dict] = {
    "default": {},
    "dev": dict(
        snr_std_intended=9.22,
        snr_std_unintended=9.22,
        intent_intended=(-2.55, 0.231),
        intent_unintended=(1.107, 0.0),
    ),
    "test": dict(
        snr_std_intended=18.09,
        snr_std_unintended=18.09,
        intent_intended=(-9.227, 1.041),
        intent_unintended=(10.251, -1.028),
    ),
}


def profile_config(profile: str = "default", **overrides) -> CorpusConfig:
    if profile not in PROFILES:
        raise ValueError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    kw = {**PROFILES[profile], "profile": profile, **overrides}
    return CorpusConfig(**kw)


# ---------------------------------------------------------------------------
# samplers
# ---------------------------------------------------------------------------


def utterance_rng(config: CorpusConfig, index: int) -> np.random.Generator:
    stream = zlib.crc32(config.split.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([config.seed, stream, index]))


def sample_snr(label: Label, config: CorpusConfig, rng: np.random.Generator) -> float:
    if label is Label.INTENDED:
        mu, sd = config.snr_mean_intended, config.snr_std_intended
    else:
        mu, sd = config.snr_mean_unintended, config.snr_std_unintended
    lo, hi = config.snr_clip
    return float(np.clip(rng.normal(mu, sd), lo, hi))


def _smooth_direction(seed: int, n: int = N_FEAT) -> np.ndarray:
    r = np.random.default_rng(seed).normal(size=n + 4)
    v = np.convolve(r, np.ones(5) / 5.0, mode="valid")
    v -= v.mean()
    return v / np.sqrt(np.mean(v * v))


# Fixed spectral shapes shared by every corpus: a speech envelope, the
# direction separating the two classes and the spectral tilt of the noise.
_BIN = np.arange(N_FEAT) / (N_FEAT - 1)
_SPEECH_ENVELOPE = 1.0 + 0.6 * np.cos(np.pi * 2.5 * _BIN) * np.exp(-1.5 * _BIN)
_CLASS_DIRECTION = _smooth_direction(20211)
_NOISE_SHAPE = 1.5 - 2.0 * _BIN


def synth_feature_components(
    label: Label, snr_db: float, n_frames: int, rng: np.random.Generator, config: CorpusConfig | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Returns the clean and noise parts (both ``(T, 40)``, float64).

    The noise is rescaled so that ``10 log10(P_signal / P_noise)`` equals
    ``snr_db`` exactly on this draw.
    """
    config = config or CorpusConfig()
    if n_frames < 1:
        raise ValueError("need at least one frame")
    intended = label is Label.INTENDED
    sign = 1.0 if intended else -1.0
    rho = config.ar_coef_intended if intended else config.ar_coef_unintended
    mean = _SPEECH_ENVELOPE + sign * config.class_offset * _CLASS_DIRECTION
    innov = rng.standard_normal((n_frames, N_FEAT))
    innov[0] /= math.sqrt(1.0 - rho * rho)
    fluct = lfilter([config.signal_std * math.sqrt(1.0 - rho * rho)], [1.0, -rho], innov, axis=0)
    signal = mean + fluct
    noise = config.noise_tilt * _NOISE_SHAPE + rng.standard_normal((n_frames, N_FEAT))
    p_sig = float(np.mean(signal * signal))
    p_noise = float(np.mean(noise * noise))
    noise *= math.sqrt(p_sig / (p_noise * 10.0 ** (snr_db / 10.0)))
    return signal, noise


def synth_features(
    label: Label, snr_db: float, n_frames: int, rng: np.random.Generator, config: CorpusConfig | None = None
) -> FeatureSequence:
    signal, noise = synth_feature_components(label, snr_db, n_frames, rng, config)
    return FeatureSequence((signal + noise).astype(np.float32))


def _lm_logprobs(vocab_size: int) -> np.ndarray:
    # command words (lower half of the vocabulary) are favoured by the LM
    w = np.where(np.arange(vocab_size) < vocab_size // 2, 3.0, 1.0)
    return np.log(w / w.sum())


def synth_lattice(
    label: Label, snr_db: float, rng: np.random.Generator, config: CorpusConfig | None = None
) -> Lattice:
    """Sausage-shaped lattice whose width and posterior flatness grow with a
    latent confusion level.  Intended speech is mostly a single confident
    path; unintended speech has many competing arcs."""
    config = config or CorpusConfig()
    intended = label is Label.INTENDED
    bias = config.confusion_bias_intended if intended else config.confusion_bias_unintended
    confusion = float(
        sigmoid(
            np.array(
                bias
                + config.confusion_snr_slope * (10.0 - snr_db) / 10.0
                + config.confusion_noise * rng.standard_normal()
            )
        )
    )
    lm = _lm_logprobs(config.vocab_size)
    n_cmd = config.vocab_size // 2
    n_pos = int(rng.integers(config.min_words, config.max_words + 1))
    n_nodes = n_pos + 1
    src, dst, word, post = [], [], [], []
    for k in range(n_pos):
        n_branch = 1 + int(rng.binomial(config.max_branch - 1, confusion))
        targets = [k + 1] * n_branch
        if k + 2 <= n_pos and rng.random() < config.skip_arc_prob * confusion:
            targets.append(k + 2)
        n_out = len(targets)
        if n_out == 1:
            probs = np.ones(1)
        else:
            a = config.top_arc_sharpness
            top = rng.beta(a * (1.0 - confusion) + 0.5, a * confusion + 0.5)
            rest = rng.dirichlet(np.ones(n_out - 1))
            probs = np.concatenate([[top], (1.0 - top) * rest])
        words = rng.choice(config.vocab_size, size=n_out, replace=n_out > config.vocab_size)
        if intended and rng.random() < config.command_word_prob:
            words[0] = rng.integers(n_cmd)
        src += [k] * n_out
        dst += targets
        word += list(words)
        post += list(probs)
    src = np.array(src)
    word = np.array(word)
    post = np.array(post)
    lm_score = lm[word]
    # am + lm softmaxed over a node's outgoing arcs reproduces the posteriors
    node_min_lm = np.full(n_nodes, np.inf)
    np.minimum.at(node_min_lm, src, lm_score)
    am_score = np.log(np.clip(post, 1e-12, 1.0)) + node_min_lm[src] - lm_score
    return Lattice(n_nodes, src, np.array(dst), word, am_score, lm_score, post)


def intent_correct_prob(label: Label, snr_db, config: CorpusConfig | None = None):
    config = config or CorpusConfig()
    a, b = config.intent_intended if label is Label.INTENDED else config.intent_unintended
    return sigmoid(np.asarray(a + b * np.asarray(snr_db, dtype=float), dtype=float))


def simulate_intent_classifier(
    label: Label, snr_db: float, rng: np.random.Generator, config: CorpusConfig | None = None
) -> Intent:
    correct = rng.random() < float(intent_correct_prob(label, snr_db, config))
    if label is Label.INTENDED:
        return Intent.NOT_BACKGROUND if correct else Intent.BACKGROUND
    return Intent.BACKGROUND if correct else Intent.NOT_BACKGROUND


def generate_utterance(config: CorpusConfig, index: int) -> UtteranceRecord:
    rng = utterance_rng(config, index)
    label = Label.INTENDED if rng.random() < config.class_prior else Label.UNINTENDED
    snr = sample_snr(label, config, rng)
    n_frames = int(rng.integers(config.min_frames, config.max_frames + 1))
    feats = synth_features(label, snr, n_frames, rng, config)
    lattice = synth_lattice(label, snr, rng, config)
    intent = simulate_intent_classifier(label, snr, rng, config)
    return UtteranceRecord(f"{config.split}-{index:06d}", label, snr, feats, lattice, intent)


def generate_corpus(config: CorpusConfig, indices: Iterable[int] | None = None) -> list[UtteranceRecord]:
    config.validate()
    if indices is None:
        indices = range(config.n_utterances)
    return [generate_utterance(config, i) for i in indices]


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def _encode_array(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a)
    le = a.astype(a.dtype.newbyteorder("<"), copy=False)
    return {
        "dtype": le.dtype.str,
        "shape": list(a.shape),
        "data": base64.b64encode(le.tobytes()).decode("ascii"),
    }


def _decode_array(d: dict) -> np.ndarray:
    raw = base64.b64decode(d["data"], validate=True)
    return np.frombuffer(raw, dtype=np.dtype(d["dtype"])).reshape(d["shape"]).copy()


def record_to_dict(r: UtteranceRecord) -> dict:
    lat = r.lattice
    return {
        "id": r.id,
        "true_label": r.true_label.value,
        "snr_db": float(r.snr_db),
        "intent_output": r.intent_output.value,
        "weak_label": None if r.weak_label is None else r.weak_label.value,
        "features": {"frame_rate_hz": r.features.frame_rate_hz, "frames": _encode_array(r.features.frames)},
        "lattice": {
            "n_nodes": lat.n_nodes,
            "src": lat.src.tolist(),
            "dst": lat.dst.tolist(),
            "word": lat.word.tolist(),
            "am_score": lat.am_score.tolist(),
            "lm_score": lat.lm_score.tolist(),
            "posterior": lat.posterior.tolist(),
        },
    }


def record_from_dict(d: dict) -> UtteranceRecord:
    lat = d["lattice"]
    lattice = Lattice(
        int(lat["n_nodes"]), lat["src"], lat["dst"], lat["word"], lat["am_score"], lat["lm_score"], lat["posterior"]
    )
    lattice.validate()
    snr = float(d["snr_db"])
    if not math.isfinite(snr):
        raise ValueError("snr_db must be finite")
    feats = FeatureSequence(_decode_array(d["features"]["frames"]), float(d["features"]["frame_rate_hz"]))
    weak = d.get("weak_label")
    return UtteranceRecord(
        id=str(d["id"]),
        true_label=Label(d["true_label"]),
        snr_db=snr,
        features=feats,
        lattice=lattice,
        intent_output=Intent(d["intent_output"]),
        weak_label=None if weak is None else WeakLabel(weak),
    )


def write_corpus(path, records: Sequence[UtteranceRecord], meta: dict | None = None) -> None:
    """One JSON header line followed by one JSON record per line.

    Floats are written with ``repr`` (shortest round-trip form) and feature
    matrices as base64 little-endian blocks, so reading back is bit-exact.
    """
    header = {"schema": SCHEMA, "version": SCHEMA_VERSION, "n_records": len(records)}
    if meta:
        header["meta"] = meta
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for r in records:
            fh.write(json.dumps(record_to_dict(r), allow_nan=False) + "\n")


def read_corpus_header(path) -> dict:
    with Path(path).open("r", encoding="utf-8") as fh:
        return _parse_header(fh.readline())


def _parse_header(line: str) -> dict:
    try:
        header = json.loads(line)
    except json.JSONDecodeError as exc:
        raise CorpusFormatError(f"line 1: malformed header ({exc.msg})") from None
    if not isinstance(header, dict) or header.get("schema") != SCHEMA:
        raise CorpusFormatError("line 1: not a weakftm corpus file")
    if header.get("version") != SCHEMA_VERSION:
        raise CorpusFormatError(f"line 1: unsupported schema version {header.get('version')!r}")
    return header


def read_corpus(path) -> list[UtteranceRecord]:
    records: list[UtteranceRecord] = []
    with Path(path).open("r", encoding="utf-8") as fh:
        first = fh.readline()
        if not first:
            raise CorpusFormatError("line 1: empty file")
        header = _parse_header(first)
        lineno = 1
        for lineno, line in enumerate(fh, start=2):
            if not line.endswith("\n"):
                raise CorpusFormatError(f"line {lineno}: truncated record")
            try:
                records.append(record_from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise CorpusFormatError(f"line {lineno}: {exc}") from None
    if len(records) != header["n_records"]:
        raise CorpusFormatError(
            f"line {lineno + 1}: expected {header['n_records']} records, found {len(records)}"
        )
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise CorpusFormatError("duplicate utterance ids")
    return records


def labels_of(records: Sequence[UtteranceRecord]) -> np.ndarray:
    return np.array([r.true_label.y for r in records], dtype=int)
