"""Ensemble score-embedding fusion of two systems.

Embeddings are concatenated per id and class probabilities averaged,
yielding fused inputs for the metrics and the novelty detector.  The
detector is refit on the fused training embeddings and its threshold
refit on the fused development scores.
"""

from dataclasses import dataclass

import numpy as np

from .dataio import EmbeddingSet, LogitSet, Manifest
from .errors import ValidationError
from .losses import softmax
from .metrics import EceConfig, MetricReport, accuracy, eer, macro_f1
from .ood import NsdModel, OodDecision, UNKNOWN_LABEL, _scale, fit_threshold, raw_similarities
from .reporting import SystemData, _augmented_batch, _manifest_rows, in_domain_report


def concat_embeddings(a: EmbeddingSet, b: EmbeddingSet) -> EmbeddingSet:
    """Per-id concatenation [a || b]; rows are matched by id, not order."""
    if set(a.ids) != set(b.ids):
        raise ValidationError("embedding sets carry different id sets")
    rows_b = b.rows_for(a.ids)
    return EmbeddingSet(ids=a.ids, data=np.concatenate([a.data, rows_b], axis=1))


def average_probs(a: LogitSet, b: LogitSet) -> tuple[tuple[str, ...], np.ndarray]:
    """Arithmetic mean of the two systems' softmax probabilities per id.

    Vocabularies must match exactly (order included).  Returns
    (ids in a's order, row-stochastic probability matrix).
    """
    if a.labels != b.labels:
        raise ValidationError("logit sets carry different label vocabularies")
    if set(a.ids) != set(b.ids):
        raise ValidationError("logit sets carry different id sets")
    probs_a = softmax(a.data)
    probs_b = softmax(b.rows_for(a.ids))
    return a.ids, (probs_a + probs_b) / 2.0


@dataclass
class FusedSystem:
    """Fused per-split artifacts of an ordered member pair."""

    members: tuple[str, str]
    labels: tuple[str, ...]
    embeddings: dict[str, EmbeddingSet]
    prob_ids: dict[str, tuple[str, ...]]
    probs: dict[str, np.ndarray]


def fuse_systems(
    sys_a: SystemData, sys_b: SystemData, members: tuple[str, str] = ("a", "b")
) -> FusedSystem:
    labels = sys_a.labels()
    if labels != sys_b.labels():
        raise ValidationError("member systems carry different label vocabularies")
    embeddings = {}
    prob_ids = {}
    probs = {}
    for split in sys_a.embeddings:
        embeddings[split] = concat_embeddings(sys_a.embeddings[split], sys_b.embeddings[split])
        prob_ids[split], probs[split] = average_probs(sys_a.logits[split], sys_b.logits[split])
    return FusedSystem(
        members=members, labels=labels, embeddings=embeddings, prob_ids=prob_ids, probs=probs
    )


def fuse_and_evaluate(
    sys_a: SystemData,
    sys_b: SystemData,
    manifest: Manifest,
    k: int = 1,
    scaling: str = "max-softmax",
    ece_cfg: EceConfig | None = None,
) -> tuple[FusedSystem, dict]:
    """Fuse two systems and evaluate the result on the eval split.

    The detector reference set is rebuilt from the fused train
    embeddings; its threshold is refit on fused dev scores (using dev
    OOD flags when present).  Returns the fused artifacts and
    {"in_domain": report, "ood": report or None}.
    """
    fused = fuse_systems(sys_a, sys_b)
    by_id = manifest.by_id()

    train_emb = fused.embeddings["train"]
    labels_by_id = {}
    for sid in train_emb.ids:
        rec = by_id.get(sid)
        if rec is None:
            raise ValidationError(f"training id {sid!r} is not in the manifest")
        labels_by_id[sid] = rec.label
    model = NsdModel(
        references=train_emb.data,
        reference_labels=tuple(labels_by_id[sid] for sid in train_emb.ids),
        scaling=scaling,
        k=k,
    )

    dev_emb = fused.embeddings["dev"]
    dev_ids = fused.prob_ids["dev"]
    dev_probs_by_id = {sid: row for sid, row in zip(dev_ids, fused.probs["dev"])}
    dev_raw = raw_similarities(dev_emb.data, model)
    dev_conf = np.asarray([dev_probs_by_id[sid].max() for sid in dev_emb.ids])
    dev_scores = _scale(dev_raw, dev_conf, model.scaling)
    dev_records = _manifest_rows(dev_emb.ids, manifest)
    dev_flags = np.asarray([rec.is_ood for rec in dev_records], dtype=bool)
    if dev_flags.any() and not dev_flags.all():
        model.tau = fit_threshold(dev_scores, dev_flags)
    else:
        model.tau = fit_threshold(dev_scores)

    eval_emb = fused.embeddings["eval"]
    eval_ids = fused.prob_ids["eval"]
    probs_by_id = {sid: row for sid, row in zip(eval_ids, fused.probs["eval"])}
    probs = np.stack([probs_by_id[sid] for sid in eval_emb.ids])
    in_report = in_domain_report(
        probs, eval_emb.ids, eval_emb, manifest, fused.labels, ece_cfg
    )

    records = _manifest_rows(eval_emb.ids, manifest)
    ood_report = None
    if any(rec.is_ood for rec in records):
        raw = raw_similarities(eval_emb.data, model)
        scores = _scale(raw, probs.max(axis=1), model.scaling)
        pred_idx = np.argmax(probs, axis=1)
        decisions = []
        for i, sid in enumerate(eval_emb.ids):
            novel = bool(scores[i] < model.tau)
            predicted = UNKNOWN_LABEL if novel else fused.labels[pred_idx[i]]
            decisions.append(
                OodDecision(
                    id=sid,
                    raw=float(raw[i]),
                    score=float(scores[i]),
                    is_novel=novel,
                    predicted=predicted,
                )
            )
        batch = _augmented_batch(decisions, manifest, fused.labels)
        is_known = np.asarray([not rec.is_ood for rec in records], dtype=bool)
        ood_report = MetricReport(
            accuracy=accuracy(batch),
            macro_f1=macro_f1(batch),
            nll=None,
            ece=None,
            eer=eer(scores, is_target=is_known),
            frechet=in_report.frechet,
        )
    return fused, {"in_domain": in_report, "ood": ood_report}
