"""Toolkit for evaluating, fusing, and stress-testing audio-deepfake
source-tracing systems from their exported embeddings and logits, plus a
desk-scale two-stage (real-emphasis / fake-dispersion) training recipe
with verified gradients."""

__version__ = "0.1.0"

from .dataio import (
    EmbeddingSet,
    LogitSet,
    Manifest,
    ManifestRecord,
    load_manifest,
    read_embeddings,
    read_logits,
    save_manifest,
    write_embeddings,
    write_logits,
)
from .linalg import MeanCov, estimate_moments, psd_sqrt, sym_eig
from .losses import (
    BetaSchedule,
    MixupConfig,
    OcSoftmaxParams,
    beta_at,
    cross_entropy,
    fd_loss,
    mixup_pair,
    npair_loss,
    oc_softmax_loss,
    regmixup_loss,
)
from .metrics import (
    EceConfig,
    MetricReport,
    PredictionBatch,
    accuracy,
    ece,
    eer,
    frechet_distance,
    macro_f1,
    nll,
)
from .model import MlpModel, adam_step, grad_check, load_checkpoint, save_checkpoint
from .ood import NsdModel, OodDecision, classify, confidence_scale, fit_nsd, fit_threshold, nsd_similarity
from .fusion import FusedSystem, average_probs, concat_embeddings, fuse_and_evaluate
from .trainer import StageResult, TrainConfig, train_fd, train_re

__all__ = [
    "__version__",
    "EmbeddingSet",
    "LogitSet",
    "Manifest",
    "ManifestRecord",
    "load_manifest",
    "read_embeddings",
    "read_logits",
    "save_manifest",
    "write_embeddings",
    "write_logits",
    "MeanCov",
    "estimate_moments",
    "psd_sqrt",
    "sym_eig",
    "BetaSchedule",
    "MixupConfig",
    "OcSoftmaxParams",
    "beta_at",
    "cross_entropy",
    "fd_loss",
    "mixup_pair",
    "npair_loss",
    "oc_softmax_loss",
    "regmixup_loss",
    "EceConfig",
    "MetricReport",
    "PredictionBatch",
    "accuracy",
    "ece",
    "eer",
    "frechet_distance",
    "macro_f1",
    "nll",
    "MlpModel",
    "adam_step",
    "grad_check",
    "load_checkpoint",
    "save_checkpoint",
    "NsdModel",
    "OodDecision",
    "classify",
    "confidence_scale",
    "fit_nsd",
    "fit_threshold",
    "nsd_similarity",
    "FusedSystem",
    "average_probs",
    "concat_embeddings",
    "fuse_and_evaluate",
    "StageResult",
    "TrainConfig",
    "train_fd",
    "train_re",
]
