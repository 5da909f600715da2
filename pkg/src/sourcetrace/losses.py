"""Training criteria with analytic gradients.

Covers the two-stage recipe: the real-emphasis stage pairs binary
cross-entropy with a one-class margin (OC-softmax) objective, and the
fake-dispersion stage combines RegMixup (cross-entropy on the original
sample plus a weighted cross-entropy on a mixed sample) with a
multi-class n-pair metric loss whose weight follows an epoch schedule.

Every function returns the loss together with gradients with respect
to its direct inputs; model-parameter gradients are obtained by
feeding these into the network backward pass.  All gradients are
validated against central finite differences in the test suite.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInputError, ShapeError, ValidationError


@dataclass(frozen=True)
class MixupConfig:
    """Mixup interpolation settings: weight of the mixed-sample term and
    the Beta(alpha, alpha) concentration for lambda draws."""

    eta: float = 1.0
    alpha: float = 10.0

    def __post_init__(self):
        if self.eta < 0:
            raise ValidationError("mixup eta must be non-negative")
        if self.alpha <= 0:
            raise ValidationError("mixup alpha must be positive")


@dataclass(frozen=True)
class BetaSchedule:
    """Epoch schedule of the n-pair weight: zero through the warmup,
    then linear from ``init`` to ``final`` at ``final_epoch``."""

    warmup_epochs: int = 20
    init: float = 1e-3
    final: float = 0.8
    final_epoch: int = 50

    def __post_init__(self):
        if self.final_epoch <= self.warmup_epochs:
            raise ValidationError("final_epoch must come after the warmup")
        if self.init < 0 or self.final < self.init:
            raise ValidationError("schedule must be non-negative and non-decreasing")


def beta_at(epoch: int, sched: BetaSchedule = BetaSchedule()) -> float:
    """N-pair weight at a 1-based epoch number."""
    if epoch < 1:
        raise ValidationError(f"epoch must be >= 1, got {epoch}")
    if epoch <= sched.warmup_epochs:
        return 0.0
    if epoch >= sched.final_epoch:
        return sched.final
    start = sched.warmup_epochs + 1
    frac = (epoch - start) / (sched.final_epoch - start)
    return sched.init + frac * (sched.final - sched.init)


@dataclass
class OcSoftmaxParams:
    """One-class margin parameters: scale, the two margins, and the
    learned unit direction vector."""

    direction: np.ndarray
    scale: float = 20.0
    real_margin: float = 0.9
    fake_margin: float = 0.2

    def __post_init__(self):
        self.direction = np.asarray(self.direction, dtype=np.float64).reshape(-1)
        if self.real_margin <= self.fake_margin:
            raise ValidationError("real margin must exceed fake margin")
        norm = float(np.linalg.norm(self.direction))
        if norm <= 0 or not np.isfinite(norm):
            raise ValidationError("direction vector must have positive finite norm")

    def renormalize(self) -> None:
        """Rescale the direction back to unit norm (call after each optimizer step)."""
        self.direction = self.direction / np.linalg.norm(self.direction)

    @classmethod
    def init_random(cls, dim: int, rng: np.random.Generator, **kwargs) -> "OcSoftmaxParams":
        vec = rng.standard_normal(dim)
        return cls(direction=vec / np.linalg.norm(vec), **kwargs)


# ---------------------------------------------------------------------------
# Cross-entropy / RegMixup


def softmax(logits: np.ndarray) -> np.ndarray:
    """Numerically stable softmax over the last axis."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _as_target_vector(target, k: int) -> np.ndarray:
    if np.isscalar(target) or (isinstance(target, np.ndarray) and target.ndim == 0):
        idx = int(target)
        if not 0 <= idx < k:
            raise ValidationError(f"target class {idx} out of range for {k} classes")
        t = np.zeros(k)
        t[idx] = 1.0
        return t
    t = np.asarray(target, dtype=np.float64).reshape(-1)
    if t.shape[0] != k:
        raise ShapeError(f"soft target has {t.shape[0]} entries for {k} classes")
    if abs(float(t.sum()) - 1.0) > 1e-8:
        raise ValidationError(f"soft target sums to {t.sum()!r}, expected 1")
    return t


def cross_entropy(logits, target) -> tuple[float, np.ndarray]:
    """Cross-entropy of a logit vector against a class index or soft target.

    Returns (loss in nats, gradient w.r.t. the logits = softmax - target).
    """
    z = np.asarray(logits, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(z)):
        raise ValidationError("logits contain non-finite values")
    t = _as_target_vector(target, z.shape[0])
    zmax = z.max()
    log_norm = zmax + np.log(np.sum(np.exp(z - zmax)))
    log_probs = z - log_norm
    loss = float(-np.sum(t * log_probs))
    grad = softmax(z) - t
    return loss, grad


def mixup_pair(x_i, y_i, x_j, y_j, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Convex interpolation of a feature/target pair at weight lambda."""
    if not 0.0 <= lam <= 1.0:
        raise ValidationError(f"mixup lambda must be in [0, 1], got {lam}")
    x_i = np.asarray(x_i, dtype=np.float64)
    x_j = np.asarray(x_j, dtype=np.float64)
    y_i = np.asarray(y_i, dtype=np.float64)
    y_j = np.asarray(y_j, dtype=np.float64)
    if x_i.shape != x_j.shape:
        raise ShapeError(f"feature shapes differ: {x_i.shape} vs {x_j.shape}")
    if y_i.shape != y_j.shape:
        raise ShapeError(f"target shapes differ: {y_i.shape} vs {y_j.shape}")
    return lam * x_i + (1.0 - lam) * x_j, lam * y_i + (1.0 - lam) * y_j


def regmixup_loss(
    logits, target, mix_logits, mix_target, cfg: MixupConfig = MixupConfig()
) -> tuple[float, np.ndarray, np.ndarray]:
    """Cross-entropy on the original sample plus eta-weighted cross-entropy
    on the mixed sample.

    Returns (loss, grad w.r.t. original logits, grad w.r.t. mixed logits).
    """
    loss_orig, grad_orig = cross_entropy(logits, target)
    loss_mix, grad_mix = cross_entropy(mix_logits, mix_target)
    return loss_orig + cfg.eta * loss_mix, grad_orig, cfg.eta * grad_mix


# ---------------------------------------------------------------------------
# Multi-class n-pair loss


@dataclass
class NpairResult:
    loss: float
    d_anchor: np.ndarray
    d_positive: np.ndarray
    d_negatives: np.ndarray


def npair_loss(anchor, positive, negatives, beta: float) -> NpairResult:
    """Metric loss pulling the anchor toward its positive and pushing it
    from one representative of every other class:

        beta * log(1 + sum_i exp(a.neg_i - a.pos))

    evaluated with a max-shifted log-sum-exp so huge inner-product gaps
    stay finite.  Gradients cover the anchor, the positive, and every
    negative row.
    """
    a = np.asarray(anchor, dtype=np.float64).reshape(-1)
    p = np.asarray(positive, dtype=np.float64).reshape(-1)
    negs = np.asarray(negatives, dtype=np.float64)
    if negs.ndim == 1:
        negs = negs.reshape(1, -1)
    if negs.shape[0] == 0:
        raise DegenerateInputError("n-pair loss needs at least one negative")
    if a.shape != p.shape or negs.shape[1] != a.shape[0]:
        raise ShapeError("anchor, positive, and negatives must share one dimension")
    if beta < 0:
        raise ValidationError("n-pair weight must be non-negative")

    pos_sim = float(a @ p)
    neg_sim = negs @ a
    diffs = neg_sim - pos_sim
    shift = max(float(diffs.max()), 0.0)
    terms = np.exp(diffs - shift)
    denom = np.exp(-shift) + float(terms.sum())
    loss = beta * (shift + np.log(denom))
    weights = terms / denom
    total_w = float(weights.sum())
    d_anchor = beta * (weights @ negs - total_w * p)
    d_positive = -beta * total_w * a
    d_negatives = beta * weights[:, None] * a[None, :]
    return NpairResult(float(loss), d_anchor, d_positive, d_negatives)


@dataclass(frozen=True)
class NpairGroup:
    """Index triple for one anchor: itself, a same-class positive, and
    one representative per other class in the batch."""

    anchor: int
    positive: int
    negatives: tuple[int, ...]


def npair_groups(labels, rng: np.random.Generator) -> list[NpairGroup]:
    """Sample anchor/positive/negative index groups for a batch.

    Every sample whose class has another member in the batch becomes an
    anchor; the positive is a uniform same-class batchmate and the
    negatives are one uniform representative per other class present.
    Returns an empty list when fewer than two classes are present.
    """
    labels = np.asarray(labels)
    classes = sorted(set(labels.tolist()))
    if len(classes) < 2:
        return []
    members = {c: np.flatnonzero(labels == c) for c in classes}
    groups = []
    for anchor in range(labels.shape[0]):
        own = members[labels[anchor]]
        if own.shape[0] < 2:
            continue
        positive = anchor
        while positive == anchor:
            positive = int(own[rng.integers(own.shape[0])])
        negatives = tuple(
            int(members[c][rng.integers(members[c].shape[0])])
            for c in classes
            if c != labels[anchor]
        )
        groups.append(NpairGroup(anchor=anchor, positive=positive, negatives=negatives))
    return groups


def npair_batch(embeddings, groups, beta: float) -> tuple[float, np.ndarray]:
    """Mean n-pair loss over the anchor groups.

    Returns (mean loss, gradient accumulated into the embedding matrix).
    """
    emb = np.asarray(embeddings, dtype=np.float64)
    d_emb = np.zeros_like(emb)
    if not groups:
        return 0.0, d_emb
    total = 0.0
    scale = 1.0 / len(groups)
    for g in groups:
        res = npair_loss(emb[g.anchor], emb[g.positive], emb[list(g.negatives)], beta)
        total += res.loss
        d_emb[g.anchor] += scale * res.d_anchor
        d_emb[g.positive] += scale * res.d_positive
        for row, grad in zip(g.negatives, res.d_negatives):
            d_emb[row] += scale * grad
    return total * scale, d_emb


# ---------------------------------------------------------------------------
# Combined fake-dispersion loss


@dataclass
class FdLossResult:
    loss: float
    regmixup_term: float
    npair_term: float
    d_logits: np.ndarray
    d_mix_logits: np.ndarray
    d_embeddings: np.ndarray


def fd_loss(
    logits,
    targets,
    mix_logits,
    mix_targets,
    embeddings,
    groups,
    beta: float,
    cfg: MixupConfig = MixupConfig(),
    normalize_embeddings: bool = False,
) -> FdLossResult:
    """Batch fake-dispersion loss: mean RegMixup plus mean n-pair term.

    ``targets``/``mix_targets`` are row-aligned soft target matrices,
    ``groups`` the anchor index groups for the n-pair term (empty groups
    with a positive beta mean the batch had a single class: the n-pair
    term is skipped with a warning and only RegMixup contributes).
    With ``normalize_embeddings`` the n-pair inner products run on
    L2-normalized rows (angular clustering), with gradients chained
    through the normalization.
    """
    logits = np.asarray(logits, dtype=np.float64)
    mix_logits = np.asarray(mix_logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    mix_targets = np.asarray(mix_targets, dtype=np.float64)
    if logits.shape != targets.shape or mix_logits.shape != mix_targets.shape:
        raise ShapeError("logit and target matrices must be row-aligned")
    n = logits.shape[0]
    if n < 1:
        raise DegenerateInputError("fd loss needs a non-empty batch")

    probs = softmax(logits)
    mix_probs = softmax(mix_logits)
    zmax = logits.max(axis=1, keepdims=True)
    log_probs = logits - zmax - np.log(np.sum(np.exp(logits - zmax), axis=1, keepdims=True))
    mzmax = mix_logits.max(axis=1, keepdims=True)
    mix_log_probs = (
        mix_logits - mzmax - np.log(np.sum(np.exp(mix_logits - mzmax), axis=1, keepdims=True))
    )
    ce_orig = -np.sum(targets * log_probs, axis=1)
    ce_mix = -np.sum(mix_targets * mix_log_probs, axis=1)
    regmixup_term = float(np.mean(ce_orig + cfg.eta * ce_mix))
    d_logits = (probs - targets) / n
    d_mix_logits = cfg.eta * (mix_probs - mix_targets) / n

    if beta > 0 and not groups:
        warnings.warn(
            "n-pair term skipped: batch contains fewer than two classes",
            stacklevel=2,
        )
    emb = np.asarray(embeddings, dtype=np.float64)
    if normalize_embeddings:
        norms = np.linalg.norm(emb, axis=1, keepdims=True)
        if np.any(norms < 1e-30):
            raise DegenerateInputError("cannot normalize a zero-norm embedding")
        units = emb / norms
        npair_term, d_units = npair_batch(units, groups, beta)
        d_embeddings = (d_units - np.sum(d_units * units, axis=1, keepdims=True) * units) / norms
    else:
        npair_term, d_embeddings = npair_batch(emb, groups, beta)

    return FdLossResult(
        loss=regmixup_term + npair_term,
        regmixup_term=regmixup_term,
        npair_term=npair_term,
        d_logits=d_logits,
        d_mix_logits=d_mix_logits,
        d_embeddings=d_embeddings,
    )


# ---------------------------------------------------------------------------
# OC-softmax (real-emphasis stage)


def _sigmoid(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + np.exp(-z))
    e = np.exp(z)
    return e / (1.0 + e)


def oc_softmax_loss(
    embedding, is_real: bool, params: OcSoftmaxParams
) -> tuple[float, np.ndarray, np.ndarray]:
    """One-class margin loss on an L2-normalized embedding.

    Real samples are pushed above the real margin along the learned
    direction, fake samples below the fake margin:

        softplus(scale * (real_margin - cos))        if real
        softplus(scale * (cos - fake_margin))        if fake

    Returns (loss, grad w.r.t. embedding, grad w.r.t. direction).  The
    direction gradient is w.r.t. the raw vector; re-normalize after the
    optimizer step.
    """
    e = np.asarray(embedding, dtype=np.float64).reshape(-1)
    w = params.direction
    if e.shape != w.shape:
        raise ShapeError(f"embedding dim {e.shape[0]} does not match direction {w.shape[0]}")
    norm = float(np.linalg.norm(e))
    if norm < 1e-30:
        raise DegenerateInputError("cannot normalize a zero-norm embedding")
    unit = e / norm
    cos = float(w @ unit)
    if is_real:
        z = params.scale * (params.real_margin - cos)
        dz_dcos = -params.scale
    else:
        z = params.scale * (cos - params.fake_margin)
        dz_dcos = params.scale
    loss = float(np.logaddexp(0.0, z))
    dl_dcos = _sigmoid(z) * dz_dcos
    d_embedding = dl_dcos * (w - cos * unit) / norm
    d_direction = dl_dcos * unit
    return loss, d_embedding, d_direction


def oc_softmax_batch(
    embeddings, is_real, params: OcSoftmaxParams
) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean OC-softmax loss over a batch.

    Returns (mean loss, grads w.r.t. each embedding row, grad w.r.t. the
    direction vector).  Vectorized equivalent of averaging
    ``oc_softmax_loss`` over the rows.
    """
    emb = np.asarray(embeddings, dtype=np.float64)
    flags = np.asarray(is_real, dtype=bool)
    if emb.ndim != 2 or flags.shape != (emb.shape[0],):
        raise ShapeError("need an N x D embedding matrix and N real/fake flags")
    w = params.direction
    if emb.shape[1] != w.shape[0]:
        raise ShapeError("embedding dim does not match direction vector")
    norms = np.linalg.norm(emb, axis=1)
    if np.any(norms < 1e-30):
        raise DegenerateInputError("cannot normalize a zero-norm embedding")
    units = emb / norms[:, None]
    cos = units @ w
    # Real rows: z = scale*(m_real - cos); fake rows: z = scale*(cos - m_fake).
    sign = np.where(flags, -1.0, 1.0)
    margin = np.where(flags, params.real_margin, -params.fake_margin)
    z = params.scale * (margin + sign * cos)
    losses = np.logaddexp(0.0, z)
    expz = np.exp(-np.abs(z))
    sig = np.where(z >= 0, 1.0 / (1.0 + expz), expz / (1.0 + expz))
    dl_dcos = sig * params.scale * sign
    n = emb.shape[0]
    d_emb = (dl_dcos / norms)[:, None] * (w[None, :] - cos[:, None] * units) / n
    d_dir = (dl_dcos[:, None] * units).sum(axis=0) / n
    return float(losses.mean()), d_emb, d_dir
