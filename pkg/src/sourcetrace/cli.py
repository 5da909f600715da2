"""Command-line interface.

One executable with subcommands for synthetic data generation,
two-stage training, evaluation, novelty detection, and ensemble
fusion.  Exit codes are a stable contract: 0 success, 2 usage error,
3 data or format error, 4 numerical failure.

Heavy modules are imported inside the command handlers so the
``--threads`` limit can be applied to the numerical backends before
numpy loads.
"""

import argparse
import json
import os
import sys
from pathlib import Path

DEFAULT_TRAIN_SETTINGS = {
    "lr": 1e-3,
    "weight_decay": 5e-4,
    "lr_decay": 0.5,
    "lr_decay_epochs": [30, 40],
    "epochs": 50,
    "batch_size": 128,
    "seed": 0,
    "hidden_sizes": [64],
    "embedding_dim": 144,
    "mixup_eta": 1.0,
    "mixup_alpha": 10.0,
    "beta_warmup_epochs": 20,
    "beta_init": 1e-3,
    "beta_final": 0.8,
    "beta_final_epoch": 50,
    "npair_normalize": False,
    "oc_scale": 20.0,
    "oc_real_margin": 0.9,
    "oc_fake_margin": 0.2,
    "real_label": "real",
}

RUN_SCHEMA = "sourcetrace-run/v1"


def _apply_thread_limit(threads: int | None) -> None:
    n = threads
    if n is None:
        env = os.environ.get("SOURCETRACE_THREADS")
        n = int(env) if env else (os.cpu_count() or 1)
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def _write_run_config(path, command: str, options: dict) -> None:
    from . import __version__

    doc = {
        "schema": RUN_SCHEMA,
        "command": command,
        "options": options,
        "version": __version__,
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sourcetrace",
        description="Evaluate, fuse, and stress-test source-tracing systems "
        "from exported embeddings and logits.",
    )
    parser.add_argument(
        "--threads",
        type=int,
        default=None,
        metavar="N",
        help="numerical backend thread limit (default: SOURCETRACE_THREADS or all cores)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="generate a seeded synthetic dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--k-sources", type=int, default=5, help="in-domain clusters incl. the real one")
    p.add_argument("--n-per-source", type=int, default=400)
    p.add_argument("--ood-sources", type=int, default=1)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--separation", type=float, default=4.0)
    p.add_argument("--ood-separation", type=float, default=1.6,
                   help="factor pushing OOD cluster centers farther out")

    p = sub.add_parser("train", help="train the desk-scale classifier")
    p.add_argument("--data", required=True, help="dataset directory from gen-synth")
    p.add_argument("--out", required=True, help="output system directory")
    p.add_argument("--stage", choices=("re", "fd", "two-stage", "fd-only"), default="two-stage")
    p.add_argument("--config", help="JSON settings file (documented key set)")
    p.add_argument("--seed", type=int, help="override the settings seed")
    p.add_argument("--epochs", type=int, help="override the settings epochs")
    p.add_argument("--batch-size", type=int, help="override the settings batch size")
    p.add_argument("--lr", type=float, help="override the settings learning rate")
    p.add_argument("--real-label", help="manifest label of the real class")
    p.add_argument("--init-checkpoint", help="checkpoint to resume from (stage=fd)")

    p = sub.add_parser("evaluate", help="score exported embeddings/logits")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--logits", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="report file")
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.add_argument("--ood", action="store_true", help="fail unless OOD rows are present")
    p.add_argument("--bins", type=int, default=10, help="calibration bins")

    p = sub.add_parser("ood", help="fit and run the novelty detector")
    p.add_argument("--system", required=True, help="system directory with per-split files")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--k", type=int, default=1, help="top-k similarity aggregation")
    p.add_argument("--scaling", choices=("max-softmax", "none"), default="max-softmax")
    p.add_argument("--tau", type=float, default=None, help="threshold override")

    p = sub.add_parser("fuse", help="fuse two systems and evaluate the ensemble")
    p.add_argument("--system-a", required=True)
    p.add_argument("--system-b", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--k", type=int, default=1)
    p.add_argument("--scaling", choices=("max-softmax", "none"), default="max-softmax")

    return parser


# ---------------------------------------------------------------------------
# Command handlers


def _cmd_gen_synth(args) -> int:
    from .synth import generate_dataset

    out = Path(args.out)
    summary = generate_dataset(
        out,
        seed=args.seed,
        k_sources=args.k_sources,
        n_per_source=args.n_per_source,
        ood_sources=args.ood_sources,
        dim=args.dim,
        separation=args.separation,
        ood_separation=args.ood_separation,
    )
    _write_run_config(
        out / "run_config.json",
        "gen-synth",
        {
            "out": str(out),
            "seed": args.seed,
            "k_sources": args.k_sources,
            "n_per_source": args.n_per_source,
            "ood_sources": args.ood_sources,
            "dim": args.dim,
            "separation": args.separation,
            "ood_separation": args.ood_separation,
        },
    )
    print(
        f"wrote {sum(summary.counts.values())} samples "
        f"({summary.counts}) to {out}"
    )
    return 0


def _load_train_settings(args) -> dict:
    from .errors import UsageError

    settings = dict(DEFAULT_TRAIN_SETTINGS)
    if args.config:
        try:
            overrides = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read settings file {args.config}: {exc}") from exc
        unknown = set(overrides) - set(settings)
        if unknown:
            raise UsageError(f"unknown settings keys {sorted(unknown)}")
        settings.update(overrides)
    for key in ("seed", "epochs", "batch_size", "lr", "real_label"):
        value = getattr(args, key, None)
        if value is not None:
            settings[key] = value
    return settings


def _cmd_train(args) -> int:
    import numpy as np

    from .dataio import (
        EmbeddingSet,
        LogitSet,
        load_manifest,
        read_embeddings,
        write_embeddings,
        write_logits,
    )
    from .errors import DataError, ValidationError
    from .losses import BetaSchedule, MixupConfig, OcSoftmaxParams
    from .model import MlpModel, load_checkpoint, save_checkpoint
    from .seeding import stream
    from .trainer import (
        TrainConfig,
        centroid_dispersion_ratio,
        train_fd,
        train_re,
        transfer_re_to_fd,
        write_trace_csv,
    )

    settings = _load_train_settings(args)
    data_dir = Path(args.data)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    manifest = load_manifest(data_dir / "manifest.jsonl")
    features = {}
    for split in ("train", "dev", "eval"):
        path = data_dir / f"{split}.steb"
        if not path.exists():
            raise DataError(f"dataset is missing {path}")
        features[split] = read_embeddings(path)

    by_id = manifest.by_id()
    vocab = manifest.train_labels()
    if len(vocab) < 2:
        raise DataError("training data must contain at least two labels")
    label_index = {lab: i for i, lab in enumerate(vocab)}

    def split_arrays(split: str, in_domain_only: bool):
        eset = features[split]
        ids, rows, labels = [], [], []
        for i, sid in enumerate(eset.ids):
            rec = by_id.get(sid)
            if rec is None:
                raise ValidationError(f"feature id {sid!r} is not in the manifest")
            if in_domain_only and rec.is_ood:
                continue
            ids.append(sid)
            rows.append(i)
            labels.append(rec.label)
        return ids, eset.data[rows], labels

    _, x_train, train_labels = split_arrays("train", in_domain_only=True)
    _, x_dev, dev_labels = split_arrays("dev", in_domain_only=True)
    y_train = np.asarray([label_index[lab] for lab in train_labels], dtype=np.int64)
    y_dev = np.asarray([label_index[lab] for lab in dev_labels], dtype=np.int64)

    real_label = settings["real_label"]
    seed = int(settings["seed"])
    cfg = TrainConfig(
        lr=float(settings["lr"]),
        weight_decay=float(settings["weight_decay"]),
        lr_decay=float(settings["lr_decay"]),
        lr_decay_epochs=tuple(settings["lr_decay_epochs"]),
        epochs=int(settings["epochs"]),
        batch_size=int(settings["batch_size"]),
        seed=seed,
    )
    sched = BetaSchedule(
        warmup_epochs=int(settings["beta_warmup_epochs"]),
        init=float(settings["beta_init"]),
        final=float(settings["beta_final"]),
        final_epoch=int(settings["beta_final_epoch"]),
    )
    mixup = MixupConfig(eta=float(settings["mixup_eta"]), alpha=float(settings["mixup_alpha"]))
    hidden = [int(h) for h in settings["hidden_sizes"]]
    d_emb = int(settings["embedding_dim"])
    d_in = features["train"].dim
    n_classes = len(vocab)

    def binary_flags(labels):
        if real_label not in vocab:
            raise DataError(
                f"real-emphasis stage needs label {real_label!r} in the training data"
            )
        return np.asarray([lab == real_label for lab in labels], dtype=bool)

    summary: dict = {"stage": args.stage, "labels": list(vocab), "seed": seed}
    results = {}

    if args.stage in ("re", "two-stage"):
        model = MlpModel([d_in, *hidden, d_emb, 2], rng=stream(seed, "train/re/init"))
    elif args.stage == "fd":
        if not args.init_checkpoint:
            raise DataError("stage=fd needs --init-checkpoint from a previous re run")
        model = load_checkpoint(args.init_checkpoint)
        if model.input_dim != d_in:
            raise ValidationError(
                f"checkpoint incompatible: expects input dim {model.input_dim}, "
                f"data has {d_in}"
            )
    else:  # fd-only
        model = MlpModel([d_in, *hidden, d_emb, n_classes], rng=stream(seed, "train/fd/init"))

    emb_init, _ = model.forward(x_dev)
    summary["dispersion_ratio_init"] = centroid_dispersion_ratio(emb_init, y_dev)

    if args.stage in ("re", "two-stage"):
        oc = OcSoftmaxParams.init_random(
            d_emb,
            stream(seed, "train/re/oc-direction"),
            scale=float(settings["oc_scale"]),
            real_margin=float(settings["oc_real_margin"]),
            fake_margin=float(settings["oc_fake_margin"]),
        )
        re_result, oc = train_re(
            model,
            x_train,
            binary_flags(train_labels),
            x_dev,
            binary_flags(dev_labels),
            cfg,
            oc=oc,
        )
        save_checkpoint(out_dir / "re.stck", model)
        write_trace_csv(out_dir / "re_trace.csv", re_result, cfg)
        results["re"] = re_result
        summary["re"] = {
            "best_epoch": re_result.best_epoch,
            "best_dev_accuracy": re_result.best_dev_accuracy,
        }

    if args.stage in ("two-stage", "fd", "fd-only"):
        if args.stage in ("two-stage", "fd"):
            transfer_re_to_fd(model, n_classes, seed)
        fd_result = train_fd(
            model, x_train, y_train, x_dev, y_dev, cfg, sched, mixup,
            npair_normalize=bool(settings["npair_normalize"]),
        )
        save_checkpoint(out_dir / "fd.stck", model)
        write_trace_csv(out_dir / "fd_trace.csv", fd_result, cfg, sched)
        results["fd"] = fd_result
        summary["fd"] = {
            "best_epoch": fd_result.best_epoch,
            "best_dev_accuracy": fd_result.best_dev_accuracy,
        }

    emb_final, _ = model.forward(x_dev)
    summary["dispersion_ratio_final"] = centroid_dispersion_ratio(emb_final, y_dev)

    # Export per-split embeddings/logits from the selected checkpoint so the
    # output directory is a complete system for evaluate/ood/fuse.
    export_labels = vocab if model.n_classes == n_classes else ("real", "fake")
    for split in ("train", "dev", "eval"):
        eset = features[split]
        emb, logits = model.forward(eset.data)
        write_embeddings(out_dir / f"{split}.steb", EmbeddingSet(ids=eset.ids, data=emb))
        write_logits(
            out_dir / f"{split}.stlg",
            LogitSet(ids=eset.ids, labels=export_labels, data=logits),
        )

    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _write_run_config(
        out_dir / "run_config.json",
        "train",
        {"data": str(data_dir), "out": str(out_dir), "stage": args.stage, **settings},
    )
    for name, result in results.items():
        print(
            f"{name}: best dev accuracy {result.best_dev_accuracy:.4f} "
            f"at epoch {result.best_epoch}"
        )
    return 0


def _cmd_evaluate(args) -> int:
    from .dataio import load_manifest, read_embeddings, read_logits
    from .metrics import EceConfig
    from .reporting import evaluate_sets, write_report

    emb = read_embeddings(args.embeddings)
    logits = read_logits(args.logits)
    manifest = load_manifest(args.manifest)
    sections = evaluate_sets(
        emb,
        logits,
        manifest,
        ece_cfg=EceConfig(m_bins=args.bins),
        require_ood=args.ood,
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_report(out, sections, fmt=args.format)
    _write_run_config(
        out.with_suffix(out.suffix + ".run.json"),
        "evaluate",
        {
            "embeddings": args.embeddings,
            "logits": args.logits,
            "manifest": args.manifest,
            "out": str(out),
            "format": args.format,
            "ood": args.ood,
            "bins": args.bins,
        },
    )
    in_report = sections["in_domain"]
    print(f"in-domain accuracy {in_report.accuracy:.4f}, macro-F1 {in_report.macro_f1:.4f}")
    return 0


def _cmd_ood(args) -> int:
    import numpy as np

    from .dataio import load_manifest
    from .errors import ValidationError
    from .ood import classify, fit_nsd, fit_threshold, save_nsd, scaled_scores
    from .reporting import (
        _manifest_rows,
        frechet_between_domains,
        load_system,
        nsd_ood_report,
        report_sections_as_dict,
    )

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    system = load_system(args.system)
    manifest = load_manifest(args.manifest)
    by_id = manifest.by_id()

    train_emb = system.embeddings["train"]
    labels_by_id = {}
    for sid in train_emb.ids:
        rec = by_id.get(sid)
        if rec is None:
            raise ValidationError(f"training id {sid!r} is not in the manifest")
        labels_by_id[sid] = rec.label
    model = fit_nsd(train_emb, labels_by_id, k=args.k, scaling=args.scaling)

    dev_emb, dev_logits = system.embeddings["dev"], system.logits["dev"]
    dev_scores = scaled_scores(dev_emb, dev_logits, model)
    dev_records = _manifest_rows(dev_emb.ids, manifest)
    dev_flags = np.asarray([rec.is_ood for rec in dev_records], dtype=bool)
    if args.tau is not None:
        model.tau = args.tau
    elif dev_flags.any() and not dev_flags.all():
        model.tau = fit_threshold(dev_scores, dev_flags)
    else:
        model.tau = fit_threshold(dev_scores)

    eval_emb, eval_logits = system.embeddings["eval"], system.logits["eval"]
    decisions = classify(eval_emb, eval_logits, model)
    scores = np.asarray([dec.score for dec in decisions])
    report = nsd_ood_report(
        decisions,
        scores,
        eval_emb.ids,
        manifest,
        eval_logits.labels,
        frechet_between_domains(eval_emb, manifest),
    )

    with open(out_dir / "decisions.jsonl", "w", encoding="utf-8") as f:
        for dec in decisions:
            f.write(
                json.dumps(
                    {
                        "id": dec.id,
                        "raw": dec.raw,
                        "score": dec.score,
                        "is_novel": dec.is_novel,
                        "predicted": dec.predicted,
                    },
                    sort_keys=True,
                )
                + "\n"
            )
    save_nsd(out_dir / "nsd.stnd", model)
    summary = {
        "tau": model.tau,
        "k": model.k,
        "scaling": model.scaling,
        "flagged_fraction": float(np.mean([dec.is_novel for dec in decisions])),
        "detection_eer": report.eer,
        "ood_accuracy": report.accuracy,
        "ood_macro_f1": report.macro_f1,
        "report": report_sections_as_dict({"in_domain": None, "ood": report})["ood"],
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _write_run_config(
        out_dir / "run_config.json",
        "ood",
        {
            "system": args.system,
            "manifest": args.manifest,
            "out": str(out_dir),
            "k": args.k,
            "scaling": args.scaling,
            "tau": args.tau,
        },
    )
    eer_text = "n/a" if report.eer is None else f"{report.eer:.4f}"
    print(
        f"tau {model.tau:.6f}, flagged {summary['flagged_fraction']:.3f}, "
        f"detection EER {eer_text}"
    )
    return 0


def _cmd_fuse(args) -> int:
    import numpy as np

    from .dataio import EmbeddingSet, LogitSet, load_manifest, write_embeddings, write_logits
    from .fusion import fuse_and_evaluate
    from .reporting import load_system, write_report

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    sys_a = load_system(args.system_a)
    sys_b = load_system(args.system_b)
    manifest = load_manifest(args.manifest)
    fused, sections = fuse_and_evaluate(
        sys_a, sys_b, manifest, k=args.k, scaling=args.scaling
    )
    for split, eset in fused.embeddings.items():
        write_embeddings(out_dir / f"{split}.steb", eset)
        # Fused probabilities are stored as log-probabilities so a softmax
        # downstream recovers them (up to float32 storage rounding).
        log_probs = np.log(np.maximum(fused.probs[split], 1e-300))
        write_logits(
            out_dir / f"{split}.stlg",
            LogitSet(ids=fused.prob_ids[split], labels=fused.labels, data=log_probs),
        )
    write_report(out_dir / "report.json", sections, fmt="json")
    _write_run_config(
        out_dir / "run_config.json",
        "fuse",
        {
            "system_a": args.system_a,
            "system_b": args.system_b,
            "manifest": args.manifest,
            "out": str(out_dir),
            "k": args.k,
            "scaling": args.scaling,
        },
    )
    in_report = sections["in_domain"]
    print(f"fused in-domain accuracy {in_report.accuracy:.4f}")
    return 0


_HANDLERS = {
    "gen-synth": _cmd_gen_synth,
    "train": _cmd_train,
    "evaluate": _cmd_evaluate,
    "ood": _cmd_ood,
    "fuse": _cmd_fuse,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _apply_thread_limit(args.threads)
    from .errors import DataError, NumericalError, UsageError

    try:
        return _HANDLERS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
