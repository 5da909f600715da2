"""Novel-source detection from embedding similarity.

Test embeddings are scored by their top-k cosine similarity to the
training (reference) embeddings, optionally smoothed by the
classifier's max-softmax confidence, and thresholded: samples whose
scaled score falls below the threshold are flagged as coming from a
novel generation source.

Detector file ("STND", little-endian):

    offset  size  field
    0       4     magic b"STND"
    4       4     u32 version (currently 1)
    8       4     u32 k
    12      8     f64 threshold (NaN when not fitted)
    20      ...   scaling mode string (u16 length + UTF-8 bytes)
    ...     8     u32 N, u32 D
    ...     N*D*8 float64 reference payload, row-major
    ...           distinct-label string block, then N u32 per-row label indices
"""

import struct
from dataclasses import dataclass

import numpy as np

from .dataio import EmbeddingSet, LogitSet, _read_exact, _read_string_block, _write_string_block
from .errors import (
    DegenerateInputError,
    FormatError,
    ShapeError,
    ValidationError,
)
from .losses import softmax

NSD_MAGIC = b"STND"
NSD_VERSION = 1

UNKNOWN_LABEL = "unknown"

SCALING_MODES = ("max-softmax", "none")


def _fold_sum(values: np.ndarray) -> np.ndarray:
    """Sum over the last axis by repeated midpoint halving.

    This reduction order makes two identities exact in floating point:
    summing a vector concatenated with itself gives exactly twice the
    single-vector sum, and swapping two equal-length halves leaves the
    result unchanged.  Both are needed so that fusing a system with
    itself (duplicated coordinates) preserves cosine scores bit for bit.
    """
    v = np.asarray(values, dtype=np.float64)
    while v.shape[-1] > 1:
        n = v.shape[-1]
        m = n // 2
        head = v[..., :m] + v[..., m : 2 * m]
        if n % 2:
            head = np.concatenate([head, v[..., 2 * m :]], axis=-1)
        v = head
    return v[..., 0]


def cosine_matrix(x: np.ndarray, refs: np.ndarray, chunk: int = 32) -> np.ndarray:
    """Pairwise cosine similarity between the rows of two matrices."""
    x = np.asarray(x, dtype=np.float64)
    refs = np.asarray(refs, dtype=np.float64)
    if x.ndim != 2 or refs.ndim != 2 or x.shape[1] != refs.shape[1]:
        raise ShapeError(
            f"incompatible shapes for cosine similarity: {x.shape} vs {refs.shape}"
        )
    ssq_x = _fold_sum(x * x)
    ssq_r = _fold_sum(refs * refs)
    if np.any(ssq_x <= 0.0) or np.any(ssq_r <= 0.0):
        raise DegenerateInputError("cannot take cosine of a zero-norm embedding")
    sims = np.empty((x.shape[0], refs.shape[0]))
    for lo in range(0, x.shape[0], chunk):
        hi = min(lo + chunk, x.shape[0])
        sims[lo:hi] = _fold_sum(x[lo:hi, None, :] * refs[None, :, :])
    sims /= np.sqrt(ssq_x[:, None] * ssq_r[None, :])
    return sims


@dataclass
class NsdModel:
    """Fitted detector: reference embeddings with per-row source labels, a
    confidence-scaling mode, the decision threshold, and the k for the
    top-k similarity aggregation."""

    references: np.ndarray
    reference_labels: tuple[str, ...]
    scaling: str = "max-softmax"
    tau: float | None = None
    k: int = 1

    def __post_init__(self):
        self.references = np.asarray(self.references, dtype=np.float64)
        self.reference_labels = tuple(self.reference_labels)
        if self.references.ndim != 2 or self.references.shape[0] < 1:
            raise ValidationError("reference set must be a non-empty matrix")
        if len(self.reference_labels) != self.references.shape[0]:
            raise ValidationError("need one label per reference row")
        if self.k < 1 or self.k > self.references.shape[0]:
            raise ValidationError(f"k must be in [1, {self.references.shape[0]}]")
        if self.scaling not in SCALING_MODES:
            raise ValidationError(f"unknown scaling mode {self.scaling!r}")
        if self.tau is not None and not np.isfinite(self.tau):
            raise ValidationError("threshold must be finite")
        norms = np.linalg.norm(self.references, axis=1)
        if np.any(norms <= 0.0):
            raise ValidationError("reference embeddings must have positive norm")

    @property
    def dim(self) -> int:
        return self.references.shape[1]

    def class_index(self) -> dict[str, np.ndarray]:
        labels = np.asarray(self.reference_labels)
        return {c: np.flatnonzero(labels == c) for c in sorted(set(self.reference_labels))}


def fit_nsd(
    train_embeddings: EmbeddingSet,
    labels_by_id: dict[str, str],
    k: int = 1,
    scaling: str = "max-softmax",
) -> NsdModel:
    """Build the reference side of the detector from training embeddings."""
    try:
        row_labels = tuple(labels_by_id[sid] for sid in train_embeddings.ids)
    except KeyError as exc:
        raise ValidationError(f"no label for training id {exc.args[0]!r}") from exc
    return NsdModel(
        references=train_embeddings.data,
        reference_labels=row_labels,
        scaling=scaling,
        k=k,
    )


def raw_similarities(emb: np.ndarray, model: NsdModel) -> np.ndarray:
    """Mean of the top-k cosine similarities to the reference set, per row."""
    emb = np.asarray(emb, dtype=np.float64)
    single = emb.ndim == 1
    if single:
        emb = emb.reshape(1, -1)
    if emb.shape[1] != model.dim:
        raise ShapeError(
            f"embedding dim {emb.shape[1]} does not match reference dim {model.dim}"
        )
    sims = cosine_matrix(emb, model.references)
    if model.k == 1:
        raw = sims.max(axis=1)
    else:
        part = np.partition(sims, sims.shape[1] - model.k, axis=1)[:, -model.k :]
        raw = part.mean(axis=1)
    return raw[0] if single else raw


def nsd_similarity(test_embedding, model: NsdModel) -> float:
    """Raw similarity score of a single test embedding."""
    return float(raw_similarities(test_embedding, model))


def confidence_scale(raw: float, logits) -> float:
    """Smooth a similarity score by the classifier's max-softmax confidence."""
    probs = softmax(np.asarray(logits, dtype=np.float64).reshape(-1))
    return float(raw * probs.max())


def _scale(raw: np.ndarray, max_probs: np.ndarray, scaling: str) -> np.ndarray:
    if scaling == "max-softmax":
        return raw * max_probs
    return raw.copy()


def fit_threshold(dev_scores, dev_is_ood=None) -> float:
    """Pick the novelty threshold from development-set scores.

    With OOD flags: the equal-error operating point between known and
    OOD scores; when a whole threshold interval attains it, the
    interval midpoint is returned.  Without flags: the 5th percentile
    of the known scores.
    """
    scores = np.asarray(dev_scores, dtype=np.float64)
    if scores.ndim != 1 or scores.shape[0] == 0:
        raise DegenerateInputError("threshold fitting needs a non-empty score vector")
    if not np.all(np.isfinite(scores)):
        raise ValidationError("dev scores contain non-finite values")
    if dev_is_ood is None:
        return float(np.percentile(scores, 5.0))
    flags = np.asarray(dev_is_ood, dtype=bool)
    if flags.shape != scores.shape:
        raise ShapeError("dev scores and OOD flags must be aligned")
    if not flags.any() or flags.all():
        raise DegenerateInputError("need both known and OOD dev scores to fit the threshold")
    known = np.sort(scores[~flags])
    ood = np.sort(scores[flags])
    distinct = np.unique(scores)
    # Operating point i flags everything below the i lowest distinct values.
    best_i = 0
    best_gap = np.inf
    for i in range(distinct.shape[0] + 1):
        cut = -np.inf if i == 0 else distinct[i - 1]
        frr = float(np.searchsorted(known, cut, side="right")) / known.shape[0]
        far = 1.0 - float(np.searchsorted(ood, cut, side="right")) / ood.shape[0]
        gap = abs(far - frr)
        if gap < best_gap:
            best_gap = gap
            best_i = i
    if best_i == 0:
        return float(distinct[0])
    if best_i == distinct.shape[0]:
        return float(np.nextafter(distinct[-1], np.inf))
    return float((distinct[best_i - 1] + distinct[best_i]) / 2.0)


@dataclass
class OodDecision:
    id: str
    raw: float
    score: float
    is_novel: bool
    predicted: str


def classify(
    test_embeddings: EmbeddingSet, test_logits: LogitSet, model: NsdModel
) -> list[OodDecision]:
    """Score and label every test sample.

    A sample is novel exactly when its scaled score falls strictly below
    the threshold; otherwise it gets the argmax class of its logits.
    """
    if model.tau is None:
        raise ValidationError("detector threshold is not fitted; call fit_threshold first")
    if set(test_embeddings.ids) != set(test_logits.ids):
        raise ValidationError("embedding and logit files carry different id sets")
    logit_rows = test_logits.rows_for(test_embeddings.ids)
    raw = raw_similarities(test_embeddings.data, model)
    probs = softmax(logit_rows)
    scaled = _scale(raw, probs.max(axis=1), model.scaling)
    pred_idx = np.argmax(logit_rows, axis=1)
    out = []
    for i, sid in enumerate(test_embeddings.ids):
        novel = bool(scaled[i] < model.tau)
        predicted = UNKNOWN_LABEL if novel else test_logits.labels[pred_idx[i]]
        out.append(
            OodDecision(
                id=sid,
                raw=float(raw[i]),
                score=float(scaled[i]),
                is_novel=novel,
                predicted=predicted,
            )
        )
    return out


def scaled_scores(embeddings: EmbeddingSet, logits: LogitSet, model: NsdModel) -> np.ndarray:
    """Scaled novelty scores aligned with ``embeddings.ids``."""
    logit_rows = logits.rows_for(embeddings.ids)
    raw = raw_similarities(embeddings.data, model)
    probs = softmax(logit_rows)
    return _scale(raw, probs.max(axis=1), model.scaling)


# ---------------------------------------------------------------------------
# Serialization


def save_nsd(path, model: NsdModel) -> None:
    vocab = sorted(set(model.reference_labels))
    index = {label: i for i, label in enumerate(vocab)}
    with open(path, "wb") as f:
        f.write(NSD_MAGIC)
        f.write(struct.pack("<II", NSD_VERSION, model.k))
        f.write(struct.pack("<d", np.nan if model.tau is None else model.tau))
        raw = model.scaling.encode("utf-8")
        f.write(struct.pack("<H", len(raw)))
        f.write(raw)
        n, d = model.references.shape
        f.write(struct.pack("<II", n, d))
        f.write(np.ascontiguousarray(model.references, dtype="<f8").tobytes())
        _write_string_block(f, vocab)
        idx = np.asarray([index[lab] for lab in model.reference_labels], dtype="<u4")
        f.write(idx.tobytes())


def load_nsd(path) -> NsdModel:
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "magic")
        if magic != NSD_MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {NSD_MAGIC!r}", offset=0)
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != NSD_VERSION:
            raise FormatError(f"unsupported version {version}", offset=4)
        (k,) = struct.unpack("<I", _read_exact(f, 4, "k"))
        (tau,) = struct.unpack("<d", _read_exact(f, 8, "threshold"))
        (slen,) = struct.unpack("<H", _read_exact(f, 2, "scaling length"))
        scaling = _read_exact(f, slen, "scaling mode").decode("utf-8")
        n, d = struct.unpack("<II", _read_exact(f, 8, "reference shape"))
        payload = _read_exact(f, n * d * 8, "reference payload")
        refs = np.frombuffer(payload, dtype="<f8").reshape(n, d).copy()
        vocab = _read_string_block(f, "label")
        idx_raw = _read_exact(f, 4 * n, "label indices")
        idx = np.frombuffer(idx_raw, dtype="<u4")
        if idx.size and int(idx.max()) >= len(vocab):
            raise FormatError("label index out of range", offset=f.tell() - 4 * n)
        if f.read(1):
            raise FormatError("trailing data after detector payload", offset=f.tell() - 1)
    labels = tuple(vocab[i] for i in idx)
    return NsdModel(
        references=refs,
        reference_labels=labels,
        scaling=scaling,
        tau=None if np.isnan(tau) else float(tau),
        k=int(k),
    )
