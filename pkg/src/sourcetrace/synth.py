"""Seeded synthetic dataset generator.

Builds K Gaussian feature clusters (one of them labelled "real", the
rest fake sources) plus held-out OOD clusters that appear only in the
dev and eval splits.  Features go into per-split STEB files and the
sample roster into a JSON-lines manifest, so the full pipeline can be
exercised without any external data.
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataio import EmbeddingSet, Manifest, ManifestRecord, save_manifest, write_embeddings
from .errors import UsageError
from .seeding import stream

REAL_LABEL = "real"

_SPLIT_FRACTIONS = {"train": 0.6, "dev": 0.2, "eval": 0.2}


@dataclass
class SynthSummary:
    labels: tuple[str, ...]
    ood_labels: tuple[str, ...]
    dim: int
    counts: dict


def _split_counts(n: int) -> dict[str, int]:
    n_train = int(round(n * _SPLIT_FRACTIONS["train"]))
    n_dev = int(round(n * _SPLIT_FRACTIONS["dev"]))
    return {"train": n_train, "dev": n_dev, "eval": n - n_train - n_dev}


def generate_dataset(
    out_dir,
    seed: int,
    k_sources: int,
    n_per_source: int,
    ood_sources: int = 1,
    dim: int = 32,
    separation: float = 4.0,
    ood_separation: float = 1.6,
) -> SynthSummary:
    """Write train/dev/eval STEB feature files and a manifest to ``out_dir``.

    Cluster centers sit at pairwise distance of roughly ``separation``
    with unit-variance isotropic noise, so ``separation`` directly
    controls class overlap.  OOD cluster centers are pushed out by the
    ``ood_separation`` factor, making novel sources genuinely foreign
    rather than interpolations of known ones.  Identical seeds produce
    byte-identical outputs.
    """
    if k_sources < 2:
        raise UsageError(f"need at least 2 sources, got {k_sources}")
    if n_per_source < 5:
        raise UsageError(f"need at least 5 samples per source, got {n_per_source}")
    if ood_sources < 0:
        raise UsageError("ood_sources must be non-negative")
    if dim < 1 or separation < 0 or ood_separation < 0:
        raise UsageError("dim must be positive, separations non-negative")

    labels = (REAL_LABEL,) + tuple(f"src{i:02d}" for i in range(1, k_sources))
    ood_labels = tuple(f"ood{i:02d}" for i in range(1, ood_sources + 1))

    center_rng = stream(seed, "synth/centers")
    raw = center_rng.standard_normal((k_sources + ood_sources, dim))
    units = raw / np.linalg.norm(raw, axis=1, keepdims=True)
    centers = (separation / np.sqrt(2.0)) * units
    # OOD centers vary along directions unused by the known sources: project
    # their draws onto the orthogonal complement of the in-domain center span
    # (when one exists), then scale by the ood_separation factor.
    if k_sources < dim:
        basis, _ = np.linalg.qr(centers[:k_sources].T)
        for i in range(k_sources, k_sources + ood_sources):
            residual = raw[i] - basis @ (basis.T @ raw[i])
            norm = np.linalg.norm(residual)
            if norm > 1e-9:
                centers[i] = (separation / np.sqrt(2.0)) * residual / norm
    centers[k_sources:] *= ood_separation

    rows: dict[str, list[np.ndarray]] = {s: [] for s in _SPLIT_FRACTIONS}
    ids: dict[str, list[str]] = {s: [] for s in _SPLIT_FRACTIONS}
    records: list[ManifestRecord] = []

    def emit(label: str, center: np.ndarray, plan: list[tuple[str, int]], is_ood: bool):
        noise_rng = stream(seed, f"synth/noise/{label}")
        count = 0
        for split, n in plan:
            for _ in range(n):
                sample = center + noise_rng.standard_normal(dim)
                rows[split].append(sample)
                sid = f"{label}-{count:04d}"
                ids[split].append(sid)
                records.append(
                    ManifestRecord(id=sid, label=label, split=split, is_ood=is_ood)
                )
                count += 1

    for label, center in zip(labels, centers[:k_sources]):
        plan = list(_split_counts(n_per_source).items())
        emit(label, center, plan, is_ood=False)
    for label, center in zip(ood_labels, centers[k_sources:]):
        n_dev = n_per_source // 2
        emit(label, center, [("dev", n_dev), ("eval", n_per_source - n_dev)], is_ood=True)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    counts = {}
    for split in _SPLIT_FRACTIONS:
        eset = EmbeddingSet(ids=tuple(ids[split]), data=np.stack(rows[split]))
        write_embeddings(out_dir / f"{split}.steb", eset)
        counts[split] = eset.n
    save_manifest(out_dir / "manifest.jsonl", Manifest(records=records))
    return SynthSummary(labels=labels, ood_labels=ood_labels, dim=dim, counts=counts)
