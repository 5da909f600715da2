"""File formats for exchanging embeddings, logits, and sample manifests.

These formats are the toolkit's public data contract, so any external
system can export its embeddings/logits for evaluation here.

Embedding file ("STEB", little-endian throughout):

    offset  size  field
    0       4     magic b"STEB"
    4       4     u32 version (currently 1)
    8       4     u32 N (rows)
    12      4     u32 D (columns)
    16      N*D*4 float32 payload, row-major
    ...           id block: u32 count (must equal N), then per id a
                  u16 byte length followed by that many UTF-8 bytes

Logit file ("STLG") is identical except a label-vocabulary block (same
string-block encoding, count = K >= 2) sits between the payload and the
id block.

Payloads are stored as 32-bit floats and promoted to 64-bit on load;
round-trips are bit-exact on the 32-bit payload.

The manifest is JSON lines.  Each record carries exactly the fields
``id``, ``label``, ``split`` ("train" | "dev" | "eval"), and optionally
``is_ood`` (dev/eval records only).  Unknown fields are rejected.
"""

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, ValidationError

EMBEDDING_MAGIC = b"STEB"
LOGIT_MAGIC = b"STLG"
FORMAT_VERSION = 1

SPLITS = ("train", "dev", "eval")


# ---------------------------------------------------------------------------
# In-memory containers


@dataclass
class EmbeddingSet:
    """Row-aligned sample ids and an N x D float matrix (64-bit in memory)."""

    ids: tuple[str, ...]
    data: np.ndarray

    def __post_init__(self):
        self.ids = tuple(self.ids)
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise ValidationError(f"embedding data must be 2-d, got shape {self.data.shape}")
        if self.data.shape[1] < 1:
            raise ValidationError("embedding dimension must be positive")
        if len(self.ids) != self.data.shape[0]:
            raise ValidationError(
                f"{len(self.ids)} ids for {self.data.shape[0]} rows"
            )
        if len(set(self.ids)) != len(self.ids):
            raise ValidationError("duplicate sample ids in embedding set")
        if not np.all(np.isfinite(self.data)):
            raise ValidationError("embedding data contains non-finite values")

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def index_of(self) -> dict[str, int]:
        return {sid: i for i, sid in enumerate(self.ids)}

    def rows_for(self, ids) -> np.ndarray:
        """Rows re-ordered to match ``ids`` (join by id, not file order)."""
        index = self.index_of()
        try:
            sel = [index[sid] for sid in ids]
        except KeyError as exc:
            raise ValidationError(f"id {exc.args[0]!r} not present in embedding set") from exc
        return self.data[sel]


@dataclass
class LogitSet:
    """Raw classifier outputs with an ordered class-name vocabulary."""

    ids: tuple[str, ...]
    labels: tuple[str, ...]
    data: np.ndarray

    def __post_init__(self):
        self.ids = tuple(self.ids)
        self.labels = tuple(self.labels)
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise ValidationError(f"logit data must be 2-d, got shape {self.data.shape}")
        if len(self.labels) < 2:
            raise ValidationError("label vocabulary must contain at least 2 classes")
        if len(set(self.labels)) != len(self.labels):
            raise ValidationError("duplicate class names in label vocabulary")
        if self.data.shape[1] != len(self.labels):
            raise ValidationError(
                f"{len(self.labels)} labels for {self.data.shape[1]} logit columns"
            )
        if len(self.ids) != self.data.shape[0]:
            raise ValidationError(f"{len(self.ids)} ids for {self.data.shape[0]} rows")
        if len(set(self.ids)) != len(self.ids):
            raise ValidationError("duplicate sample ids in logit set")
        if not np.all(np.isfinite(self.data)):
            raise ValidationError("logit data contains non-finite values")

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def n_classes(self) -> int:
        return len(self.labels)

    def index_of(self) -> dict[str, int]:
        return {sid: i for i, sid in enumerate(self.ids)}

    def rows_for(self, ids) -> np.ndarray:
        index = self.index_of()
        try:
            sel = [index[sid] for sid in ids]
        except KeyError as exc:
            raise ValidationError(f"id {exc.args[0]!r} not present in logit set") from exc
        return self.data[sel]


@dataclass
class ManifestRecord:
    id: str
    label: str
    split: str
    is_ood: bool = False


@dataclass
class Manifest:
    """Validated sample roster with split membership."""

    records: list[ManifestRecord] = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for rec in self.records:
            if rec.split not in SPLITS:
                raise ValidationError(f"unknown split {rec.split!r} for id {rec.id!r}")
            if rec.id in seen:
                raise ValidationError(f"duplicate manifest id {rec.id!r}")
            seen.add(rec.id)
            if rec.split == "train" and rec.is_ood:
                raise ValidationError(f"train record {rec.id!r} flagged as OOD")

    def __len__(self) -> int:
        return len(self.records)

    def by_id(self) -> dict[str, ManifestRecord]:
        return {rec.id: rec for rec in self.records}

    def split(self, name: str) -> list[ManifestRecord]:
        if name not in SPLITS:
            raise ValidationError(f"unknown split {name!r}")
        return [rec for rec in self.records if rec.split == name]

    def train_labels(self) -> tuple[str, ...]:
        """Known-label vocabulary: the sorted distinct train labels."""
        return tuple(sorted({rec.label for rec in self.records if rec.split == "train"}))

    def has_ood(self, split_name: str | None = None) -> bool:
        return any(
            rec.is_ood and (split_name is None or rec.split == split_name)
            for rec in self.records
        )


# ---------------------------------------------------------------------------
# Binary readers/writers


def _read_exact(f, size: int, what: str) -> bytes:
    start = f.tell()
    buf = f.read(size)
    if len(buf) != size:
        raise FormatError(
            f"truncated {what}: wanted {size} bytes, got {len(buf)}", offset=start
        )
    return buf


def _write_string_block(f, strings) -> None:
    f.write(struct.pack("<I", len(strings)))
    for s in strings:
        raw = s.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValidationError(f"string too long for u16 length prefix: {s[:32]!r}...")
        f.write(struct.pack("<H", len(raw)))
        f.write(raw)


def _read_string_block(f, what: str, expected_count: int | None = None) -> list[str]:
    count_off = f.tell()
    (count,) = struct.unpack("<I", _read_exact(f, 4, f"{what} count"))
    if expected_count is not None and count != expected_count:
        raise FormatError(
            f"{what} count {count} does not match header value {expected_count}",
            offset=count_off,
        )
    out = []
    seen = set()
    for i in range(count):
        entry_off = f.tell()
        (length,) = struct.unpack("<H", _read_exact(f, 2, f"{what} length prefix"))
        raw = _read_exact(f, length, f"{what} bytes")
        try:
            text = raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{what} entry {i} is not valid UTF-8", offset=entry_off) from exc
        if text in seen:
            raise FormatError(f"duplicate {what} entry {text!r}", offset=entry_off)
        seen.add(text)
        out.append(text)
    return out


def _check_eof(f) -> None:
    pos = f.tell()
    if f.read(1):
        raise FormatError("trailing data after end of file structure", offset=pos)


def _dump_matrix_file(f, magic: bytes, ids, data: np.ndarray, labels=None) -> None:
    payload = np.ascontiguousarray(data, dtype="<f4")
    if not np.all(np.isfinite(payload)):
        raise ValidationError("payload is not finite in 32-bit storage precision")
    n, d = payload.shape
    f.write(magic)
    f.write(struct.pack("<III", FORMAT_VERSION, n, d))
    f.write(payload.tobytes(order="C"))
    if labels is not None:
        _write_string_block(f, labels)
    _write_string_block(f, ids)


def _load_matrix_file(f, magic: bytes, with_labels: bool):
    got = _read_exact(f, 4, "magic")
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}", offset=0)
    (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    n, d = struct.unpack("<II", _read_exact(f, 8, "shape header"))
    raw = _read_exact(f, n * d * 4, "float32 payload")
    data = np.frombuffer(raw, dtype="<f4").reshape(n, d).astype(np.float64)
    labels = None
    if with_labels:
        labels = _read_string_block(f, "label")
    ids = _read_string_block(f, "id", expected_count=n)
    _check_eof(f)
    return ids, labels, data


def write_embeddings(path, eset: EmbeddingSet) -> None:
    with open(path, "wb") as f:
        _dump_matrix_file(f, EMBEDDING_MAGIC, eset.ids, eset.data)


def read_embeddings(path) -> EmbeddingSet:
    with open(path, "rb") as f:
        ids, _, data = _load_matrix_file(f, EMBEDDING_MAGIC, with_labels=False)
    return EmbeddingSet(ids=tuple(ids), data=data)


def write_logits(path, lset: LogitSet) -> None:
    with open(path, "wb") as f:
        _dump_matrix_file(f, LOGIT_MAGIC, lset.ids, lset.data, labels=lset.labels)


def read_logits(path) -> LogitSet:
    with open(path, "rb") as f:
        ids, labels, data = _load_matrix_file(f, LOGIT_MAGIC, with_labels=True)
    return LogitSet(ids=tuple(ids), labels=tuple(labels), data=data)


# ---------------------------------------------------------------------------
# Manifest

_MANIFEST_REQUIRED = {"id", "label", "split"}
_MANIFEST_ALLOWED = _MANIFEST_REQUIRED | {"is_ood"}


def load_manifest(path) -> Manifest:
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"manifest line {lineno} is not valid JSON: {exc}") from exc
            if not isinstance(obj, dict):
                raise ValidationError(f"manifest line {lineno} is not an object")
            keys = set(obj)
            unknown = keys - _MANIFEST_ALLOWED
            if unknown:
                raise ValidationError(
                    f"manifest line {lineno} has unknown fields {sorted(unknown)}"
                )
            missing = _MANIFEST_REQUIRED - keys
            if missing:
                raise ValidationError(
                    f"manifest line {lineno} is missing fields {sorted(missing)}"
                )
            if not all(isinstance(obj[k], str) for k in ("id", "label", "split")):
                raise ValidationError(f"manifest line {lineno}: id/label/split must be strings")
            is_ood = obj.get("is_ood", False)
            if not isinstance(is_ood, bool):
                raise ValidationError(f"manifest line {lineno}: is_ood must be a boolean")
            if obj["split"] == "train" and "is_ood" in obj:
                raise ValidationError(
                    f"manifest line {lineno}: is_ood is only valid on dev/eval records"
                )
            records.append(
                ManifestRecord(id=obj["id"], label=obj["label"], split=obj["split"], is_ood=is_ood)
            )
    return Manifest(records=records)


def save_manifest(path, manifest: Manifest) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for rec in manifest.records:
            obj = {"id": rec.id, "label": rec.label, "split": rec.split}
            if rec.split != "train":
                obj["is_ood"] = rec.is_ood
            f.write(json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n")
