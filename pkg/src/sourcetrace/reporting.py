"""Shared evaluation pipeline: turning embeddings + logits + a manifest
into in-domain and OOD metric reports.

The in-domain report covers the non-OOD rows of the given files with
accuracy, macro-F1, NLL, and ECE; the Fréchet distance is computed
between the in-domain and OOD embedding moments whenever both sides
have enough rows.  Two OOD-scenario flavors exist:

* without a fitted detector, the only computable OOD metric is the
  detection EER using max-softmax confidence as the score;
* with novelty decisions, accuracy and macro-F1 are scored over all
  rows against an augmented label set where OOD rows carry a reserved
  "unknown" truth label.  NLL and ECE are left unset there because the
  unknown class has no probability model.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataio import EmbeddingSet, LogitSet, Manifest, read_embeddings, read_logits
from .errors import DataError, ValidationError
from .linalg import estimate_moments
from .losses import softmax
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
from .ood import UNKNOWN_LABEL, OodDecision

REPORT_SCHEMA = "sourcetrace-report/v1"

SPLIT_FILES = ("train", "dev", "eval")


@dataclass
class SystemData:
    """Per-split embeddings and logits exported by one system."""

    embeddings: dict[str, EmbeddingSet]
    logits: dict[str, LogitSet]

    def labels(self) -> tuple[str, ...]:
        vocabs = {ls.labels for ls in self.logits.values()}
        if len(vocabs) != 1:
            raise ValidationError("splits of one system carry different vocabularies")
        return next(iter(vocabs))


def load_system(directory) -> SystemData:
    """Load a system directory holding {train,dev,eval}.steb/.stlg files."""
    directory = Path(directory)
    embeddings = {}
    logits = {}
    for split in SPLIT_FILES:
        steb = directory / f"{split}.steb"
        stlg = directory / f"{split}.stlg"
        if not steb.exists() or not stlg.exists():
            raise DataError(f"system directory {directory} is missing the {split} split")
        embeddings[split] = read_embeddings(steb)
        logits[split] = read_logits(stlg)
    return SystemData(embeddings=embeddings, logits=logits)


def _manifest_rows(ids, manifest: Manifest):
    by_id = manifest.by_id()
    try:
        return [by_id[sid] for sid in ids]
    except KeyError as exc:
        raise ValidationError(f"id {exc.args[0]!r} is not in the manifest") from exc


def prediction_batch(
    probs: np.ndarray, ids, manifest: Manifest, labels: tuple[str, ...]
) -> PredictionBatch:
    """In-domain prediction batch for the given probability rows.

    Rows whose manifest record is flagged OOD are dropped; the remaining
    truth labels must appear in the vocabulary.
    """
    records = _manifest_rows(ids, manifest)
    label_index = {lab: i for i, lab in enumerate(labels)}
    keep = []
    truth = []
    for i, rec in enumerate(records):
        if rec.is_ood:
            continue
        if rec.label not in label_index:
            raise ValidationError(
                f"label {rec.label!r} of id {rec.id!r} is not in the vocabulary"
            )
        keep.append(i)
        truth.append(label_index[rec.label])
    return PredictionBatch(probs=probs[keep], true_idx=np.asarray(truth, dtype=np.int64))


def frechet_between_domains(emb_set: EmbeddingSet, manifest: Manifest) -> float | None:
    """Fréchet distance between the in-domain and OOD embedding moments of
    one split's embedding file; None when either side has < 2 rows."""
    records = _manifest_rows(emb_set.ids, manifest)
    flags = np.asarray([rec.is_ood for rec in records], dtype=bool)
    if flags.sum() < 2 or (~flags).sum() < 2:
        return None
    mom_in = estimate_moments(emb_set.data[~flags])
    mom_out = estimate_moments(emb_set.data[flags])
    return frechet_distance(mom_in, mom_out)


def msp_detection_eer(probs: np.ndarray, ids, manifest: Manifest) -> float | None:
    """Detection EER with max-softmax confidence as the known-ness score."""
    records = _manifest_rows(ids, manifest)
    is_known = np.asarray([not rec.is_ood for rec in records], dtype=bool)
    if not is_known.any() or is_known.all():
        return None
    return eer(probs.max(axis=1), is_known)


def in_domain_report(
    probs: np.ndarray,
    ids,
    emb_set: EmbeddingSet | None,
    manifest: Manifest,
    labels: tuple[str, ...],
    ece_cfg: EceConfig | None = None,
) -> MetricReport:
    batch = prediction_batch(probs, ids, manifest, labels)
    frechet = frechet_between_domains(emb_set, manifest) if emb_set is not None else None
    return MetricReport(
        accuracy=accuracy(batch),
        macro_f1=macro_f1(batch),
        nll=nll(batch),
        ece=ece(batch, ece_cfg or EceConfig()),
        eer=None,
        frechet=frechet,
    )


def _augmented_batch(
    decisions: list[OodDecision], manifest: Manifest, labels: tuple[str, ...]
) -> PredictionBatch:
    """All-rows batch over the vocabulary + "unknown", encoding the novelty
    decisions as one-hot rows (supports accuracy/F1, not NLL/ECE)."""
    aug = list(labels) + [UNKNOWN_LABEL]
    index = {lab: i for i, lab in enumerate(aug)}
    by_id = manifest.by_id()
    probs = np.zeros((len(decisions), len(aug)))
    truth = np.zeros(len(decisions), dtype=np.int64)
    for i, dec in enumerate(decisions):
        rec = by_id.get(dec.id)
        if rec is None:
            raise ValidationError(f"id {dec.id!r} is not in the manifest")
        probs[i, index[dec.predicted]] = 1.0
        true_label = UNKNOWN_LABEL if rec.is_ood else rec.label
        if true_label not in index:
            raise ValidationError(f"label {true_label!r} is not in the vocabulary")
        truth[i] = index[true_label]
    return PredictionBatch(probs=probs, true_idx=truth)


def nsd_ood_report(
    decisions: list[OodDecision],
    scores: np.ndarray,
    ids,
    manifest: Manifest,
    labels: tuple[str, ...],
    frechet: float | None,
) -> MetricReport:
    """OOD-scenario report from fitted-detector decisions.

    Accuracy and macro-F1 run over all rows with novel predictions and
    OOD truths mapped to the reserved "unknown" class; EER is the
    detection EER of the scaled scores.
    """
    batch = _augmented_batch(decisions, manifest, labels)
    records = _manifest_rows(ids, manifest)
    is_known = np.asarray([not rec.is_ood for rec in records], dtype=bool)
    detection = None
    if is_known.any() and not is_known.all():
        detection = eer(np.asarray(scores), is_target=is_known)
    return MetricReport(
        accuracy=accuracy(batch),
        macro_f1=macro_f1(batch),
        nll=None,
        ece=None,
        eer=detection,
        frechet=frechet,
    )


def evaluate_sets(
    emb_set: EmbeddingSet,
    logit_set: LogitSet,
    manifest: Manifest,
    ece_cfg: EceConfig | None = None,
    require_ood: bool = False,
) -> dict:
    """Detector-free evaluation of one split's embedding/logit files.

    Returns {"in_domain": report, "ood": report or None}; the OOD
    section appears when the files contain OOD rows and carries the
    max-softmax detection EER plus the shared Fréchet distance.
    """
    if set(emb_set.ids) != set(logit_set.ids):
        raise ValidationError("embedding and logit files carry different id sets")
    ids = emb_set.ids
    probs = softmax(logit_set.rows_for(ids))
    records = _manifest_rows(ids, manifest)
    has_ood = any(rec.is_ood for rec in records)
    if require_ood and not has_ood:
        raise DataError("OOD evaluation requested but the inputs have no OOD rows")
    in_report = in_domain_report(probs, ids, emb_set, manifest, logit_set.labels, ece_cfg)
    ood_report = None
    if has_ood:
        ood_report = MetricReport(
            accuracy=None,
            macro_f1=None,
            nll=None,
            ece=None,
            eer=msp_detection_eer(probs, ids, manifest),
            frechet=in_report.frechet,
        )
    return {"in_domain": in_report, "ood": ood_report}


def _clean(value):
    if value is None:
        return None
    if isinstance(value, float) and not np.isfinite(value):
        return None
    return value


def report_sections_as_dict(sections: dict) -> dict:
    out = {"schema": REPORT_SCHEMA}
    for name in ("in_domain", "ood"):
        rep = sections.get(name)
        out[name] = (
            None if rep is None else {k: _clean(v) for k, v in rep.as_dict().items()}
        )
    return out


def write_report(path, sections: dict, fmt: str = "json") -> None:
    """Serialize report sections as JSON or CSV with the stable key set."""
    doc = report_sections_as_dict(sections)
    path = Path(path)
    if fmt == "json":
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    elif fmt == "csv":
        keys = ("accuracy", "macro_f1", "eer", "nll", "ece", "frechet")
        lines = ["section," + ",".join(keys)]
        for name in ("in_domain", "ood"):
            rep = doc[name]
            if rep is None:
                continue
            cells = ["" if rep[k] is None else repr(rep[k]) for k in keys]
            lines.append(name + "," + ",".join(cells))
        path.write_text("\n".join(lines) + "\n")
    else:
        raise ValidationError(f"unknown report format {fmt!r}")
