"""Two-stage training loops for the desk-scale classifier.

Stage one (real emphasis) treats the task as binary real-vs-fake
classification with cross-entropy plus the OC-softmax margin objective.
Stage two (fake dispersion) re-initializes the output head to K source
classes and trains with RegMixup plus the scheduled n-pair loss.

Runs are fully deterministic under a fixed seed: batch order, mixup
draws, and n-pair sampling each use their own derived stream.
"""

import csv
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError, TrainingError, ValidationError
from .losses import (
    BetaSchedule,
    MixupConfig,
    OcSoftmaxParams,
    beta_at,
    fd_loss,
    npair_groups,
    oc_softmax_batch,
    softmax,
)
from .model import AdamState, MlpModel, adam_step
from .seeding import stream


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 5e-4
    lr_decay: float = 0.5
    lr_decay_epochs: tuple[int, ...] = (30, 40)
    epochs: int = 50
    batch_size: int = 128
    optimizer: str = "adam"
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0:
            raise ValidationError("learning rate must be non-negative")
        if self.epochs < 1:
            raise ValidationError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ValidationError("batch size must be at least 1")
        if self.optimizer != "adam":
            raise ValidationError(f"unsupported optimizer {self.optimizer!r}")

    def lr_at(self, epoch: int) -> float:
        decays = sum(1 for e in self.lr_decay_epochs if epoch >= e)
        return self.lr * (self.lr_decay**decays)


@dataclass
class StageResult:
    """Selected (best dev accuracy) parameters plus per-epoch traces."""

    parameters: list[np.ndarray]
    loss_trace: list[float]
    dev_accuracy_trace: list[float]
    best_epoch: int
    oc_direction: np.ndarray | None = None

    @property
    def best_dev_accuracy(self) -> float:
        return self.dev_accuracy_trace[self.best_epoch - 1]


def _one_hot(indices: np.ndarray, k: int) -> np.ndarray:
    out = np.zeros((indices.shape[0], k))
    out[np.arange(indices.shape[0]), indices] = 1.0
    return out


def _batch_slices(n: int, batch_size: int):
    for lo in range(0, n, batch_size):
        yield slice(lo, min(lo + batch_size, n))


def stratified_order(labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Round-robin interleave of per-class shuffled indices.

    Consecutive windows of the returned order mix classes as evenly as
    the data allows, so every full batch sees at least two classes.
    """
    classes = sorted(set(labels.tolist()))
    pools = []
    for c in classes:
        idx = np.flatnonzero(labels == c)
        rng.shuffle(idx)
        pools.append(list(idx))
    rng.shuffle(pools)
    order = []
    while pools:
        for pool in pools:
            order.append(pool.pop())
        pools = [p for p in pools if p]
    return np.asarray(order, dtype=np.int64)


def _step_or_fail(params, grads, state, lr, weight_decay, epoch, batch):
    try:
        adam_step(params, grads, state, lr, weight_decay)
    except TrainingError as exc:
        raise TrainingError(f"epoch {epoch}, batch {batch}: {exc}") from exc


def classification_accuracy(model: MlpModel, x: np.ndarray, y: np.ndarray) -> float:
    _, logits = model.forward(x)
    return float(np.mean(np.argmax(logits, axis=1) == y))


def train_re(
    model: MlpModel,
    x: np.ndarray,
    is_real: np.ndarray,
    x_dev: np.ndarray,
    is_real_dev: np.ndarray,
    cfg: TrainConfig,
    oc: OcSoftmaxParams | None = None,
) -> tuple[StageResult, OcSoftmaxParams]:
    """Real-emphasis stage: binary cross-entropy plus OC-softmax.

    Real samples are class 0, fakes class 1.  Returns the stage result
    (best-dev parameters restored onto the model) and the final
    OC-softmax parameters.
    """
    x = np.asarray(x, dtype=np.float64)
    is_real = np.asarray(is_real, dtype=bool)
    if model.n_classes != 2:
        raise ValidationError("real-emphasis training needs a 2-way output head")
    if not (is_real.any() and (~is_real).any()):
        raise DegenerateInputError("real-emphasis training needs both real and fake samples")

    if oc is None:
        oc = OcSoftmaxParams.init_random(
            model.embedding_dim, stream(cfg.seed, "train/re/oc-direction")
        )
    shuffle_rng = stream(cfg.seed, "train/re/shuffle")
    y = (~is_real).astype(np.int64)  # real -> 0, fake -> 1
    targets = _one_hot(y, 2)

    state = AdamState.for_params(model.parameters())
    oc_state = AdamState.for_params([oc.direction])
    loss_trace: list[float] = []
    dev_trace: list[float] = []
    best_epoch = 0
    best_acc = -1.0
    best_params: list[np.ndarray] = []
    best_direction = oc.direction.copy()

    for epoch in range(1, cfg.epochs + 1):
        lr = cfg.lr_at(epoch)
        order = shuffle_rng.permutation(x.shape[0])
        total_loss = 0.0
        for b, sl in enumerate(_batch_slices(x.shape[0], cfg.batch_size)):
            idx = order[sl]
            xb, tb, rb = x[idx], targets[idx], is_real[idx]
            emb, logits, cache = model.forward(xb, want_cache=True)
            probs = softmax(logits)
            zmax = logits.max(axis=1, keepdims=True)
            log_probs = logits - zmax - np.log(
                np.sum(np.exp(logits - zmax), axis=1, keepdims=True)
            )
            ce_mean = float(np.mean(-np.sum(tb * log_probs, axis=1)))
            d_logits = (probs - tb) / xb.shape[0]
            oc_mean, d_emb, d_dir = oc_softmax_batch(emb, rb, oc)
            grads = model.backward(cache, d_logits, d_emb)
            params = model.parameters()
            _step_or_fail(params, grads, state, lr, cfg.weight_decay, epoch, b)
            model.set_parameters(params)
            # The direction is updated without weight decay and pulled back
            # to unit norm after every optimizer step.
            _step_or_fail([oc.direction], [d_dir], oc_state, lr, 0.0, epoch, b)
            oc.renormalize()
            total_loss += (ce_mean + oc_mean) * xb.shape[0]
        loss_trace.append(total_loss / x.shape[0])
        dev_acc = classification_accuracy(model, x_dev, (~np.asarray(is_real_dev, bool)).astype(np.int64))
        dev_trace.append(dev_acc)
        # Ties go to the later epoch: at equal dev accuracy the longer-trained
        # parameters carry the more refined embedding geometry.
        if dev_acc >= best_acc:
            best_acc = dev_acc
            best_epoch = epoch
            best_params = model.copy_parameters()
            best_direction = oc.direction.copy()

    model.set_parameters(best_params)
    oc.direction = best_direction
    result = StageResult(
        parameters=best_params,
        loss_trace=loss_trace,
        dev_accuracy_trace=dev_trace,
        best_epoch=best_epoch,
        oc_direction=best_direction.copy(),
    )
    return result, oc


def train_fd(
    model: MlpModel,
    x: np.ndarray,
    y: np.ndarray,
    x_dev: np.ndarray,
    y_dev: np.ndarray,
    cfg: TrainConfig,
    sched: BetaSchedule | None = BetaSchedule(),
    mixup: MixupConfig = MixupConfig(),
    npair_normalize: bool = False,
) -> StageResult:
    """Fake-dispersion stage: RegMixup plus the scheduled n-pair loss.

    ``sched=None`` disables the n-pair term entirely (pure RegMixup).
    Dev accuracy drives checkpoint selection.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    n_classes = model.n_classes
    if y.min(initial=0) < 0 or y.max(initial=0) >= n_classes:
        raise ValidationError("class index out of range for the model head")
    if len(set(y.tolist())) < 2:
        raise DegenerateInputError("fake-dispersion training needs at least two classes")

    shuffle_rng = stream(cfg.seed, "train/fd/shuffle")
    mixup_rng = stream(cfg.seed, "train/fd/mixup")
    npair_rng = stream(cfg.seed, "train/fd/npair")
    targets = _one_hot(y, n_classes)

    state = AdamState.for_params(model.parameters())
    loss_trace: list[float] = []
    dev_trace: list[float] = []
    best_epoch = 0
    best_acc = -1.0
    best_params: list[np.ndarray] = []

    for epoch in range(1, cfg.epochs + 1):
        lr = cfg.lr_at(epoch)
        beta = beta_at(epoch, sched) if sched is not None else 0.0
        order = stratified_order(y, shuffle_rng)
        total_loss = 0.0
        for b, sl in enumerate(_batch_slices(x.shape[0], cfg.batch_size)):
            idx = order[sl]
            xb, yb, tb = x[idx], y[idx], targets[idx]
            partner = mixup_rng.permutation(xb.shape[0])
            lam = mixup_rng.beta(mixup.alpha, mixup.alpha, size=xb.shape[0])
            x_mix = lam[:, None] * xb + (1.0 - lam[:, None]) * xb[partner]
            t_mix = lam[:, None] * tb + (1.0 - lam[:, None]) * tb[partner]
            emb, logits, cache = model.forward(xb, want_cache=True)
            _, mix_logits, mix_cache = model.forward(x_mix, want_cache=True)
            groups = npair_groups(yb, npair_rng) if sched is not None else []
            res = fd_loss(
                logits, tb, mix_logits, t_mix, emb, groups, beta, mixup,
                normalize_embeddings=npair_normalize,
            )
            grads = model.backward(cache, res.d_logits, res.d_embeddings)
            mix_grads = model.backward(mix_cache, res.d_mix_logits)
            combined = [g + mg for g, mg in zip(grads, mix_grads)]
            params = model.parameters()
            _step_or_fail(params, combined, state, lr, cfg.weight_decay, epoch, b)
            model.set_parameters(params)
            total_loss += res.loss * xb.shape[0]
        loss_trace.append(total_loss / x.shape[0])
        dev_acc = classification_accuracy(model, x_dev, y_dev)
        dev_trace.append(dev_acc)
        if dev_acc >= best_acc:
            best_acc = dev_acc
            best_epoch = epoch
            best_params = model.copy_parameters()

    model.set_parameters(best_params)
    return StageResult(
        parameters=best_params,
        loss_trace=loss_trace,
        dev_accuracy_trace=dev_trace,
        best_epoch=best_epoch,
    )


def transfer_re_to_fd(model: MlpModel, n_classes: int, seed: int) -> None:
    """Carry all layers over from the RE stage and re-initialize the output
    head for K-way classification with small uniform weights."""
    model.reinit_head(n_classes, stream(seed, "train/fd/head"))


def centroid_dispersion_ratio(embeddings: np.ndarray, labels: np.ndarray) -> float:
    """Mean inter-class centroid distance over mean intra-class distance.

    Higher means the classes are better separated relative to their
    spread; infinite when every class collapses onto its centroid.
    """
    emb = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    classes = sorted(set(labels.tolist()))
    if len(classes) < 2:
        raise DegenerateInputError("dispersion ratio needs at least two classes")
    centroids = np.stack([emb[labels == c].mean(axis=0) for c in classes])
    inter = []
    for i in range(len(classes)):
        for j in range(i + 1, len(classes)):
            inter.append(float(np.linalg.norm(centroids[i] - centroids[j])))
    intra = []
    for i, c in enumerate(classes):
        rows = emb[labels == c]
        intra.extend(np.linalg.norm(rows - centroids[i], axis=1).tolist())
    mean_intra = float(np.mean(intra))
    if mean_intra == 0.0:
        return float("inf")
    return float(np.mean(inter)) / mean_intra


def write_trace_csv(path, result: StageResult, cfg: TrainConfig, sched: BetaSchedule | None = None) -> None:
    """Per-epoch loss/accuracy trace with the effective lr and n-pair weight."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "loss", "dev_accuracy", "lr", "beta"])
        for i, (loss, acc) in enumerate(zip(result.loss_trace, result.dev_accuracy_trace), start=1):
            beta = beta_at(i, sched) if sched is not None else 0.0
            writer.writerow([i, repr(loss), repr(acc), repr(cfg.lr_at(i)), repr(beta)])
