"""File-based pipeline stages: every stage reads and writes declared files only.

Layout of a full run under ``out_dir``::

    config.json                    resolved configuration
    corpus/{train,dev,test}.jsonl
    weak/train.jsonl, weak/stats.json
    models/{lrnn,aftm,aftm-d}.params + .history.json
    teacher_scores.csv
    scores/{dev,test}/<tag>.csv
    eval/metrics.json, eval/det_<tag>.csv, eval/det.svg, eval/table.txt
    report.json, report.txt
"""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import evalkit as ek
from .aftm import TINY, AcousticFTMClassifier
from .corpus import CorpusConfig, Label, profile_config, read_corpus, read_corpus_header, write_corpus
from .corpus import generate_corpus, labels_of
from .lrnn import LatticeRNNClassifier
from .params_io import load_params
from .train import (
    EMBEDDING_MSE,
    KdHyper,
    TrainHyper,
    precompute_teacher_scores,
    read_teacher_scores,
    teacher_vector,
    write_teacher_scores,
)
from .weaklabel import apply_weak_labels, weak_targets

log = logging.getLogger(__name__)

SPLITS = ("train", "dev", "test")
MODEL_ROWS = ("aftm", "lrnn", "aftm-d", "lrnn+aftm", "lrnn+aftm-d")
ROW_NAMES = {
    "aftm": "AFTM",
    "lrnn": "LRNN",
    "aftm-d": "AFTM-D",
    "lrnn+aftm": "LRNN & AFTM",
    "lrnn+aftm-d": "LRNN & AFTM-D",
}


class StageError(RuntimeError):
    """A stage could not run; ``stage`` names it."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage!r} failed: {message}")
        self.stage = stage


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class CorpusSection:
    n_train: int = 8500
    n_dev: int = 1000
    n_test: int = 2000
    train_profile: str = "dev"
    dev_profile: str = "dev"
    test_profile: str = "test"
    overrides: dict = field(default_factory=lambda: {"min_frames": 30, "max_frames": 90})

    def split_config(self, split: str, seed: int) -> CorpusConfig:
        n = {"train": self.n_train, "dev": self.n_dev, "test": self.n_test}[split]
        profile = {"train": self.train_profile, "dev": self.dev_profile, "test": self.test_profile}[split]
        return profile_config(profile, n_utterances=n, split=split, seed=seed, **self.overrides)


@dataclass
class WeakLabelSection:
    low_db: float = 5.0
    high_db: float = 15.0
    limit: int | None = 5000


def _lrnn_default() -> dict:
    return {"word_embedding_dim": 32, "hidden_dim": 16}


def _aftm_default() -> dict:
    return dict(TINY, dropout_rate=0.1, positional_encoding=False)


def _lrnn_train_default() -> dict:
    return {"learning_rate": 3e-3, "clip_norm": 1.0, "batch_size": 32, "max_epochs": 20, "patience": 5}


def _aftm_train_default() -> dict:
    return {"learning_rate": 1e-3, "clip_norm": 1.0, "batch_size": 32, "max_epochs": 10, "patience": 5}


@dataclass
class PipelineConfig:
    """Everything a run needs.  JSON schema mirrors the field layout."""

    seed: int = 0
    out_dir: str = "run"
    corpus: CorpusSection = field(default_factory=CorpusSection)
    weaklabel: WeakLabelSection = field(default_factory=WeakLabelSection)
    lrnn: dict = field(default_factory=_lrnn_default)
    aftm: dict = field(default_factory=_aftm_default)
    train_lrnn: dict = field(default_factory=_lrnn_train_default)
    train_aftm: dict = field(default_factory=_aftm_train_default)
    kd: KdHyper = field(default_factory=KdHyper)

    def validate(self) -> None:
        if self.weaklabel.low_db >= self.weaklabel.high_db:
            raise ValueError("weak-label thresholds need low_db < high_db")
        if self.weaklabel.limit is not None and self.weaklabel.limit < 1:
            raise ValueError("weaklabel.limit must be positive")
        for split in SPLITS:
            self.corpus.split_config(split, self.seed).validate()
        self.kd.validate()
        for name in ("train_lrnn", "train_aftm"):
            TrainHyper(**getattr(self, name)).validate()
        self.lrnn_estimator()
        self.aftm_estimator(distill=False).config.validate()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        sections = {"corpus": CorpusSection, "weaklabel": WeakLabelSection, "kd": KdHyper}
        for key, typ in sections.items():
            if key in d:
                sub = dict(d[key])
                bad = set(sub) - {f.name for f in dataclasses.fields(typ)}
                if bad:
                    raise ValueError(f"unknown {key} keys: {sorted(bad)}")
                d[key] = typ(**sub)
        for key, default in (
            ("lrnn", _lrnn_default),
            ("aftm", _aftm_default),
            ("train_lrnn", _lrnn_train_default),
            ("train_aftm", _aftm_train_default),
        ):
            if key in d:
                d[key] = {**default(), **d[key]}
        return cls(**d)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(raw)

    def vocab_size(self) -> int:
        return self.corpus.split_config("train", self.seed).vocab_size

    def lrnn_estimator(self) -> LatticeRNNClassifier:
        return LatticeRNNClassifier(
            vocab_size=self.vocab_size(), random_state=self.seed, **self.lrnn, **self.train_lrnn
        )

    def aftm_estimator(self, distill: bool) -> AcousticFTMClassifier:
        kd = dict(alpha=self.kd.alpha, kd_eps=self.kd.eps, kd_variant=self.kd.variant) if distill else {}
        return AcousticFTMClassifier(random_state=self.seed, **self.aftm, **self.train_aftm, **kd)


def echo_config(out_dir, config: dict, name: str = "config.json") -> Path:
    path = Path(out_dir) / name
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(config, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


def stage_gen(config: PipelineConfig, out_dir) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    for split in SPLITS:
        cc = config.corpus.split_config(split, config.seed)
        path = out_dir / f"{split}.jsonl"
        write_corpus(path, generate_corpus(cc), meta={"corpus_config": cc.to_dict()})
        paths[split] = path
    return paths


def stage_weaklabel(corpus_path, out_path, stats_path, low_db=5.0, high_db=15.0, limit=None):
    records = read_corpus(corpus_path)
    kept, stats = apply_weak_labels(records, low_db, high_db, limit=limit)
    if not kept:
        raise ValueError("weak labeling kept no utterances")
    meta = dict(read_corpus_header(corpus_path).get("meta", {}))
    meta["weak_label"] = {"low_db": low_db, "high_db": high_db, "limit": limit}
    write_corpus(out_path, kept, meta=meta)
    Path(stats_path).write_text(stats.to_json() + "\n", encoding="utf-8")
    return stats


def _training_targets(records) -> np.ndarray:
    if any(r.weak_label is None for r in records):
        raise ValueError("training corpus has no weak labels; run the weaklabel stage first")
    return np.asarray(weak_targets(records))


def stage_train(
    model: str,
    config: PipelineConfig,
    data_path,
    dev_path,
    out_path,
    teacher_scores_path=None,
    teacher_embeddings_path=None,
) -> list[dict]:
    """Train one model and write its params plus a ``.history.json`` next to them."""
    if model not in ("lrnn", "aftm", "aftm-d"):
        raise ValueError(f"unknown model {model!r}")
    distill = model == "aftm-d"
    if distill:
        needed = teacher_embeddings_path if config.kd.variant == EMBEDDING_MSE else teacher_scores_path
        if needed is None or not Path(needed).exists():
            raise StageError(
                "teacher-scores",
                f"training aftm-d needs the teacher file {needed or '(not given)'}; run `teacher-scores` first",
            )
    train = read_corpus(data_path)
    y = _training_targets(train)
    dev = read_corpus(dev_path)
    y_dev = labels_of(dev)
    if model == "lrnn":
        est = config.lrnn_estimator()
        est.fit([r.lattice for r in train], y, [r.lattice for r in dev], y_dev)
    else:
        est = config.aftm_estimator(distill)
        kw = {}
        ids = [r.id for r in train]
        if distill and config.kd.variant == EMBEDDING_MSE:
            kw["teacher_embeddings"] = read_teacher_embeddings(teacher_embeddings_path, ids)
        elif distill:
            kw["teacher_scores"] = teacher_vector(ids, read_teacher_scores(teacher_scores_path))
        est.fit([r.features for r in train], y, X_dev=[r.features for r in dev], y_dev=y_dev, **kw)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    est.save(out_path)
    _write_json(history_path(out_path), est.history_)
    return est.history_


def history_path(params_path) -> Path:
    p = Path(params_path)
    return p.with_name(p.stem + ".history.json")


def load_model(path):
    header, _, _ = load_params(path)
    kind = header["kind"]
    if kind == "lrnn":
        return LatticeRNNClassifier.load(path)
    if kind == "aftm":
        return AcousticFTMClassifier.load(path)
    raise ValueError(f"{path}: unknown model kind {kind!r}")


def _model_inputs(est, records):
    if isinstance(est, LatticeRNNClassifier):
        return [r.lattice for r in records]
    return [r.features for r in records]


def stage_teacher_scores(params_path, corpus_path, out_path, embeddings_path=None) -> dict[str, float]:
    teacher = load_model(params_path)
    if not isinstance(teacher, LatticeRNNClassifier):
        raise ValueError("teacher scores come from an lrnn model")
    records = read_corpus(corpus_path)
    scores = precompute_teacher_scores(records, teacher)
    write_teacher_scores(out_path, scores)
    if embeddings_path is not None:
        write_teacher_embeddings(embeddings_path, [r.id for r in records], teacher.embed([r.lattice for r in records]))
    return scores


def write_teacher_embeddings(path, ids: Sequence[str], emb: np.ndarray) -> None:
    order = np.argsort(ids, kind="stable")
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write("id," + ",".join(f"e{k}" for k in range(emb.shape[1])) + "\n")
        for i in order:
            fh.write(ids[i] + "," + ",".join(repr(float(v)) for v in emb[i]) + "\n")


def read_teacher_embeddings(path, ids: Sequence[str]) -> np.ndarray:
    rows = {}
    with Path(path).open(encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split(",")
        if not header or header[0] != "id":
            raise ValueError(f"{path}: expected header starting with 'id'")
        for line in fh:
            parts = line.rstrip("\n").split(",")
            rows[parts[0]] = [float(v) for v in parts[1:]]
    missing = [i for i in ids if i not in rows]
    if missing:
        raise KeyError(f"no teacher embedding for {len(missing)} ids, e.g. {missing[:5]}")
    return np.array([rows[i] for i in ids])


def stage_score(params_path, corpus_path, out_path, tag: str) -> list[ek.ScoreRecord]:
    est = load_model(params_path)
    records = read_corpus(corpus_path)
    scores = est.decision_function(_model_inputs(est, records))
    out = [ek.ScoreRecord(r.id, tag, float(s)) for r, s in zip(records, scores)]
    Path(out_path).parent.mkdir(parents=True, exist_ok=True)
    ek.write_scores(out_path, out)
    return out


def read_labels(path) -> dict[str, int]:
    """Ground truth from a corpus file or an ``id,label`` CSV (label 0/1 or a Label name)."""
    path = Path(path)
    if path.suffix == ".csv":
        out = {}
        lines = path.read_text(encoding="utf-8").splitlines()
        if not lines or lines[0].strip() != "id,label":
            raise ValueError(f"{path}: expected header 'id,label'")
        for n, line in enumerate(lines[1:], start=2):
            k, _, v = line.partition(",")
            v = v.strip()
            out[k] = int(v) if v in ("0", "1") else Label(v).y
        return out
    return {r.id: r.true_label.y for r in read_corpus(path)}


def _align_to_labels(scores: dict[str, float], labels: dict[str, int], name: str):
    if scores.keys() != labels.keys():
        diff = sorted(set(scores) ^ set(labels))
        raise ValueError(f"{name}: ids differ from the labels in {len(diff)} places, e.g. {diff[:5]}")
    ids = sorted(labels)
    return np.array([scores[i] for i in ids]), np.array([labels[i] for i in ids])


def group_by_tag(records: Sequence[ek.ScoreRecord]) -> dict[str, dict[str, float]]:
    out: dict[str, dict[str, float]] = {}
    for r in records:
        out.setdefault(r.model_tag, {})[r.id] = r.score
    return out


def stage_eval(
    score_sets: dict[str, dict[str, float]],
    labels: dict[str, int],
    out_dir,
    fuse_pairs: Sequence[tuple[str, str]] = (),
    plot: bool = True,
) -> dict[str, dict[str, float]]:
    """Metrics per score set (plus equal-weight fusions) and DET exports."""
    if not score_sets:
        raise ValueError("eval needs at least one score set")
    sets = dict(score_sets)
    for a, b in fuse_pairs:
        if a not in sets or b not in sets:
            raise ValueError(f"cannot fuse {a!r} and {b!r}: available {sorted(sets)}")
        tag = f"{a}+{b}"
        sets[tag] = {r.id: r.score for r in ek.fuse_scores(sets[a], sets[b], tag)}
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    table, curves = {}, {}
    for tag, scores in sets.items():
        s, y = _align_to_labels(scores, labels, tag)
        curve = ek.det_curve(s, y)
        curves[tag] = curve
        table[tag] = {"eer": ek.eer(curve), "fa_at_4pct_frr": ek.far_at_frr(curve, 0.04), "auc": ek.auc_det(curve)}
        ek.write_det(out_dir / f"det_{tag}.csv", curve)
    ek.write_metrics(out_dir / "metrics.json", table)
    (out_dir / "table.txt").write_text(ek.format_table(table) + "\n", encoding="utf-8")
    if plot:
        (out_dir / "det.svg").write_text(ek.det_svg(curves), encoding="utf-8")
    return table


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


def check_orderings(eers: dict[str, float], tolerance: float = 0.005) -> dict[str, bool]:
    """Single-run ordering checks between the five table rows."""
    return {
        "lrnn_beats_aftm": eers["lrnn"] < eers["aftm"],
        "aftm_d_gains_40pct": eers["aftm-d"] <= 0.6 * eers["aftm"],
        "fusion_matches_lrnn": eers["lrnn+aftm-d"] <= eers["lrnn"] + tolerance,
        "distilled_fusion_not_worse": eers["lrnn+aftm"] >= eers["lrnn+aftm-d"],
    }


def format_report(table: dict, checks: dict[str, bool], extra: dict | None = None) -> str:
    named = {ROW_NAMES.get(k, k): table[k] for k in MODEL_ROWS if k in table}
    lines = [ek.format_table(named), ""]
    for k, ok in checks.items():
        lines.append(f"{'ok  ' if ok else 'FAIL'} {k}")
    for k, v in (extra or {}).items():
        lines.append(f"{k}: {v}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# full run
# ---------------------------------------------------------------------------


@dataclass
class RunPaths:
    root: Path

    def __post_init__(self):
        self.root = Path(self.root)

    def corpus(self, split: str) -> Path:
        return self.root / "corpus" / f"{split}.jsonl"

    @property
    def weak(self) -> Path:
        return self.root / "weak" / "train.jsonl"

    @property
    def weak_stats(self) -> Path:
        return self.root / "weak" / "stats.json"

    def model(self, tag: str) -> Path:
        return self.root / "models" / f"{tag}.params"

    @property
    def teacher(self) -> Path:
        return self.root / "teacher_scores.csv"

    @property
    def teacher_embeddings(self) -> Path:
        return self.root / "teacher_embeddings.csv"

    def scores(self, split: str, tag: str) -> Path:
        return self.root / "scores" / split / f"{tag}.csv"

    @property
    def eval_dir(self) -> Path:
        return self.root / "eval"


def run_pipeline(config: PipelineConfig, out_dir=None, resume: bool = False) -> dict:
    """gen -> weaklabel -> lrnn -> teacher scores -> aftm -> aftm-d -> score -> eval -> report.

    With ``resume`` a stage is skipped when all of its outputs already exist,
    so deleting files reruns from the earliest missing stage.
    """
    config.validate()
    root = Path(out_dir or config.out_dir)
    paths = RunPaths(root)
    root.mkdir(parents=True, exist_ok=True)
    echo_config(root, config.to_dict())
    timings: dict[str, float] = {}
    dirty = False

    def run(stage: str, outputs: Sequence[Path] | None, fn: Callable[[], object]):
        # once a stage reruns, everything downstream reruns too; None means always run
        nonlocal dirty
        if resume and not dirty and outputs is not None and all(Path(p).exists() for p in outputs):
            return
        dirty = True
        t0 = time.perf_counter()
        try:
            fn()
        except StageError:
            raise
        except Exception as exc:
            raise StageError(stage, f"{type(exc).__name__}: {exc}") from exc
        timings[stage] = round(time.perf_counter() - t0, 3)
        log.info("stage %s done in %.1fs", stage, timings[stage])

    run("gen", [paths.corpus(s) for s in SPLITS], lambda: stage_gen(config, root / "corpus"))
    wl = config.weaklabel
    paths.weak.parent.mkdir(parents=True, exist_ok=True)
    run(
        "weaklabel",
        [paths.weak, paths.weak_stats],
        lambda: stage_weaklabel(paths.corpus("train"), paths.weak, paths.weak_stats, wl.low_db, wl.high_db, wl.limit),
    )
    dev = paths.corpus("dev")
    run("train-lrnn", [paths.model("lrnn")], lambda: stage_train("lrnn", config, paths.weak, dev, paths.model("lrnn")))
    embed = config.kd.variant == EMBEDDING_MSE
    teacher_out = [paths.teacher] + ([paths.teacher_embeddings] if embed else [])
    run(
        "teacher-scores",
        teacher_out,
        lambda: stage_teacher_scores(
            paths.model("lrnn"), paths.weak, paths.teacher, paths.teacher_embeddings if embed else None
        ),
    )
    run("train-aftm", [paths.model("aftm")], lambda: stage_train("aftm", config, paths.weak, dev, paths.model("aftm")))
    run(
        "train-aftm-d",
        [paths.model("aftm-d")],
        lambda: stage_train(
            "aftm-d",
            config,
            paths.weak,
            dev,
            paths.model("aftm-d"),
            teacher_scores_path=paths.teacher,
            teacher_embeddings_path=paths.teacher_embeddings if embed else None,
        ),
    )
    models = ("lrnn", "aftm", "aftm-d")
    for split in ("dev", "test"):
        run(
            f"score-{split}",
            [paths.scores(split, m) for m in models],
            lambda split=split: [stage_score(paths.model(m), paths.corpus(split), paths.scores(split, m), m) for m in models],
        )

    result: dict = {}

    def evaluate():
        labels = read_labels(paths.corpus("test"))
        sets = {m: group_by_tag(ek.read_scores(paths.scores("test", m)))[m] for m in models}
        table = stage_eval(sets, labels, paths.eval_dir, [("lrnn", "aftm"), ("lrnn", "aftm-d")])
        dev_labels = read_labels(paths.corpus("dev"))
        dl, yd = _align_to_labels(group_by_tag(ek.read_scores(paths.scores("dev", "lrnn")))["lrnn"], dev_labels, "dev")
        dd, _ = _align_to_labels(group_by_tag(ek.read_scores(paths.scores("dev", "aftm-d")))["aftm-d"], dev_labels, "dev")
        weight, fused = ek.weighted_fuse(sets["lrnn"], sets["aftm-d"], (dl, dd), yd, tag="lrnn+aftm-d(w)")
        s, y = _align_to_labels({r.id: r.score for r in fused}, labels, "weighted fusion")
        result["table"] = table
        result["weighted_fusion"] = {"weight_lrnn": weight, "eer": ek.equal_error_rate(s, y)}

    run("eval", None, evaluate)
    table = result["table"]
    checks = check_orderings({k: v["eer"] for k, v in table.items()})
    report = {
        "seed": config.seed,
        "rows": {ROW_NAMES[k]: table[k] for k in MODEL_ROWS},
        "orderings": checks,
        "weighted_fusion": result["weighted_fusion"],
        "weak_label_stats": json.loads(paths.weak_stats.read_text(encoding="utf-8")),
    }
    _write_json(root / "report.json", report)
    extra = {"weighted fusion (lrnn weight, EER)": (result["weighted_fusion"]["weight_lrnn"], round(result["weighted_fusion"]["eer"], 4))}
    (root / "report.txt").write_text(format_report(table, checks, extra), encoding="utf-8")
    # timings change from run to run, so they stay out of the report files
    report["timings"] = timings
    return report
