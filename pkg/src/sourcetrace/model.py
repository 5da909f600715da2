"""Small dense feedforward classifier with explicit parameters and gradients.

Layer stack: input -> hidden layers (ReLU) -> linear embedding layer ->
linear output head.  The embedding (penultimate) activations are what
the metric losses and the OOD detector operate on.  Backpropagation is
written out explicitly and verified against finite differences.

Checkpoint file ("STCK", little-endian):

    offset  size  field
    0       4     magic b"STCK"
    4       4     u32 version (currently 1)
    8       4     u32 number of layer sizes L
    12      4*L   u32 layer sizes [d_in, hidden..., d_emb, n_classes]
    ...           float64 parameter payload: W then b per layer, row-major
"""

import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, ShapeError, TrainingError, ValidationError

CHECKPOINT_MAGIC = b"STCK"
CHECKPOINT_VERSION = 1

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class MlpModel:
    """Dense ReLU network; the last two layers (embedding, head) are linear."""

    def __init__(self, layer_sizes, rng: np.random.Generator | None = None):
        sizes = [int(s) for s in layer_sizes]
        if len(sizes) < 3:
            raise ValidationError(
                "need at least [input, embedding, output] layer sizes"
            )
        if any(s < 1 for s in sizes):
            raise ValidationError(f"layer sizes must be positive, got {sizes}")
        self.sizes = sizes
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        rng = rng or np.random.default_rng(0)
        for i in range(len(sizes) - 1):
            fan_in, fan_out = sizes[i], sizes[i + 1]
            # He scaling on ReLU layers, Xavier-ish on the linear tail.
            scale = np.sqrt(2.0 / fan_in) if i < len(sizes) - 3 else np.sqrt(1.0 / fan_in)
            self.weights.append(rng.standard_normal((fan_in, fan_out)) * scale)
            self.biases.append(np.zeros(fan_out))

    # -- structure ---------------------------------------------------------

    @property
    def input_dim(self) -> int:
        return self.sizes[0]

    @property
    def embedding_dim(self) -> int:
        return self.sizes[-2]

    @property
    def n_classes(self) -> int:
        return self.sizes[-1]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def parameters(self) -> list[np.ndarray]:
        """Parameter tensors in canonical order (W0, b0, W1, b1, ...)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def set_parameters(self, tensors) -> None:
        tensors = list(tensors)
        if len(tensors) != 2 * self.n_layers:
            raise ShapeError("parameter list length does not match the model")
        for i in range(self.n_layers):
            w, b = tensors[2 * i], tensors[2 * i + 1]
            if w.shape != self.weights[i].shape or b.shape != self.biases[i].shape:
                raise ShapeError("parameter tensor shapes do not match the model")
            self.weights[i] = np.array(w, dtype=np.float64)
            self.biases[i] = np.array(b, dtype=np.float64)

    def copy_parameters(self) -> list[np.ndarray]:
        return [p.copy() for p in self.parameters()]

    def reinit_head(self, n_classes: int, rng: np.random.Generator, scale: float = 1e-2) -> None:
        """Replace the output head, e.g. going from the binary stage to
        K-way classification; small uniform weights, zero bias."""
        if n_classes < 2:
            raise ValidationError("output head needs at least 2 classes")
        d_emb = self.embedding_dim
        self.sizes[-1] = int(n_classes)
        self.weights[-1] = rng.uniform(-scale, scale, size=(d_emb, n_classes))
        self.biases[-1] = np.zeros(n_classes)

    # -- forward/backward ---------------------------------------------------

    def forward(self, x, want_cache: bool = False):
        """Run the network on an N x d_in batch.

        Returns (embeddings, logits) or (embeddings, logits, cache) when
        ``want_cache`` is set; the cache feeds :meth:`backward`.
        """
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x.reshape(1, -1)
        if x.shape[1] != self.input_dim:
            raise ShapeError(
                f"input has {x.shape[1]} columns, model expects {self.input_dim}"
            )
        activations = [x]
        pre = []
        a = x
        n_hidden = self.n_layers - 2
        for i in range(n_hidden):
            z = a @ self.weights[i] + self.biases[i]
            pre.append(z)
            a = np.maximum(z, 0.0)
            activations.append(a)
        emb = a @ self.weights[-2] + self.biases[-2]
        logits = emb @ self.weights[-1] + self.biases[-1]
        if not want_cache:
            return emb, logits
        cache = {"activations": activations, "pre": pre, "embedding": emb}
        return emb, logits, cache

    def backward(self, cache, d_logits, d_embedding=None) -> list[np.ndarray]:
        """Parameter gradients for upstream gradients on the logits and,
        optionally, directly on the embeddings.

        Gradient tensors come back in the canonical parameter order.
        """
        if cache is None or "activations" not in cache:
            raise ValidationError("backward needs the cache from forward(want_cache=True)")
        activations = cache["activations"]
        pre = cache["pre"]
        emb = cache["embedding"]
        d_logits = np.asarray(d_logits, dtype=np.float64)
        if d_logits.shape != (emb.shape[0], self.n_classes):
            raise ShapeError("d_logits shape does not match the forward batch")

        grads_w = [None] * self.n_layers
        grads_b = [None] * self.n_layers

        grads_w[-1] = emb.T @ d_logits
        grads_b[-1] = d_logits.sum(axis=0)
        d_emb = d_logits @ self.weights[-1].T
        if d_embedding is not None:
            d_emb = d_emb + np.asarray(d_embedding, dtype=np.float64)

        grads_w[-2] = activations[-1].T @ d_emb
        grads_b[-2] = d_emb.sum(axis=0)
        d_a = d_emb @ self.weights[-2].T

        for i in range(self.n_layers - 3, -1, -1):
            d_z = d_a * (pre[i] > 0.0)
            grads_w[i] = activations[i].T @ d_z
            grads_b[i] = d_z.sum(axis=0)
            if i > 0:
                d_a = d_z @ self.weights[i].T

        out = []
        for gw, gb in zip(grads_w, grads_b):
            out.extend((gw, gb))
        return out


# ---------------------------------------------------------------------------
# Adam with decoupled weight decay


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params) -> "AdamState":
        return cls(m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params])


def adam_step(
    params: list[np.ndarray],
    grads: list[np.ndarray],
    state: AdamState,
    lr: float,
    weight_decay: float = 0.0,
) -> None:
    """One in-place Adam update with decoupled (multiplicative) weight decay.

    Raises TrainingError on non-finite gradients.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("params, grads, and optimizer state must be aligned")
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in parameter tensor {i}")
    state.t += 1
    t = state.t
    bc1 = 1.0 - ADAM_BETA1**t
    bc2 = 1.0 - ADAM_BETA2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        if weight_decay:
            p -= lr * weight_decay * p
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)


# ---------------------------------------------------------------------------
# Gradient verification


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    per_tensor: list[float]

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def grad_check(
    model: MlpModel,
    objective,
    tolerance: float = 1e-4,
    step: float = 1e-5,
) -> GradCheckReport:
    """Compare an objective's analytic parameter gradients against central
    finite differences.

    ``objective(model)`` must return (loss, gradient tensors in canonical
    parameter order).  Relative error per coordinate is
    |analytic - numeric| / max(1e-6, |analytic| + |numeric|).
    """
    _, analytic = objective(model)
    params = model.parameters()
    if len(analytic) != len(params):
        raise ShapeError("objective returned a gradient list of the wrong length")
    per_tensor = []
    worst = 0.0
    for p, g in zip(params, analytic):
        g = np.asarray(g, dtype=np.float64)
        numeric = np.zeros_like(p)
        flat_p = p.reshape(-1)
        flat_n = numeric.reshape(-1)
        for j in range(flat_p.size):
            orig = flat_p[j]
            flat_p[j] = orig + step
            loss_plus = objective(model)[0]
            flat_p[j] = orig - step
            loss_minus = objective(model)[0]
            flat_p[j] = orig
            flat_n[j] = (loss_plus - loss_minus) / (2.0 * step)
        denom = np.maximum(1e-6, np.abs(g) + np.abs(numeric))
        rel = float((np.abs(g - numeric) / denom).max(initial=0.0))
        per_tensor.append(rel)
        worst = max(worst, rel)
    return GradCheckReport(max_rel_error=worst, tolerance=tolerance, per_tensor=per_tensor)


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(path, model: MlpModel) -> None:
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(model.sizes)))
        f.write(struct.pack(f"<{len(model.sizes)}I", *model.sizes))
        payload = np.concatenate([p.reshape(-1) for p in model.parameters()])
        f.write(payload.astype("<f8").tobytes())


def load_checkpoint(path) -> MlpModel:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"bad checkpoint magic {magic!r}", offset=0)
        header = f.read(8)
        if len(header) != 8:
            raise FormatError("truncated checkpoint header", offset=4)
        version, n_sizes = struct.unpack("<II", header)
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}", offset=4)
        raw_sizes = f.read(4 * n_sizes)
        if len(raw_sizes) != 4 * n_sizes:
            raise FormatError("truncated checkpoint size list", offset=12)
        sizes = struct.unpack(f"<{n_sizes}I", raw_sizes)
        model = MlpModel(sizes, rng=np.random.default_rng(0))
        expected = model.parameter_count()
        payload = f.read(8 * expected)
        if len(payload) != 8 * expected:
            raise FormatError(
                f"truncated checkpoint payload: wanted {8 * expected} bytes",
                offset=12 + 4 * n_sizes,
            )
        if f.read(1):
            raise FormatError("trailing data after checkpoint payload", offset=f.tell() - 1)
    flat = np.frombuffer(payload, dtype="<f8")
    tensors = []
    pos = 0
    for p in model.parameters():
        tensors.append(flat[pos : pos + p.size].reshape(p.shape).copy())
        pos += p.size
    model.set_parameters(tensors)
    return model
