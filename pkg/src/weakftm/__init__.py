"""Weakly supervised false-trigger mitigation: synthetic corpus, weak labels,
a lattice RNN teacher, a self-attention acoustic student with distillation,
and DET-based evaluation."""

from .aftm import AcousticFTMClassifier, AftmConfig, aftm_param_count
from .corpus import (
    CorpusConfig,
    FeatureSequence,
    Intent,
    Label,
    Lattice,
    UtteranceRecord,
    WeakLabel,
    generate_corpus,
    profile_config,
    read_corpus,
    write_corpus,
)
from .evalkit import WeightedScoreFusion, auc_det, det_curve, eer, far_at_frr, fuse_scores, metrics
from .lrnn import LatticeRNNClassifier, LrnnConfig, lrnn_param_count
from .pipeline import PipelineConfig, run_pipeline
from .train import KdHyper, TrainHyper, bce_loss, kd_loss, sym_kl
from .weaklabel import apply_weak_labels, coverage_stats, weak_label

__version__ = "0.1.0"

__all__ = [
    "AcousticFTMClassifier",
    "AftmConfig",
    "CorpusConfig",
    "FeatureSequence",
    "Intent",
    "KdHyper",
    "Label",
    "Lattice",
    "LatticeRNNClassifier",
    "LrnnConfig",
    "PipelineConfig",
    "TrainHyper",
    "UtteranceRecord",
    "WeakLabel",
    "WeightedScoreFusion",
    "aftm_param_count",
    "apply_weak_labels",
    "auc_det",
    "bce_loss",
    "coverage_stats",
    "det_curve",
    "eer",
    "far_at_frr",
    "fuse_scores",
    "generate_corpus",
    "kd_loss",
    "lrnn_param_count",
    "metrics",
    "profile_config",
    "read_corpus",
    "run_pipeline",
    "sym_kl",
    "weak_label",
    "write_corpus",
]
