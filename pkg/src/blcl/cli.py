"""Command line: ``blcl run|eval|report|print-defaults``.

Exit codes: 0 ok, 2 config/data error, 3 artifact error, 4 divergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import torch

from blcl import __version__
from blcl.config import ExperimentConfig, dump_config, defaults, load_config
from blcl.errors import ArtifactError, ConfigError, DivergenceError

logger = logging.getLogger("blcl")

SUMMARY_NAME = "run_summary.json"


def _sequence(cfg: ExperimentConfig):
    from blcl.data import build_task_sequence

    return build_task_sequence(
        cfg.dataset, cfg.partition, cfg.seed, root=cfg.data_root, class_order=cfg.class_order,
        train_per_class=cfg.train_per_class, test_per_class=cfg.test_per_class, image_size=cfg.image_size,
    )


def cmd_run(config_path, output_dir=None) -> int:
    from blcl import trainer

    cfg = load_config(config_path)
    if output_dir:
        cfg.output_dir = str(output_dir)
    out = Path(cfg.output_dir)
    trainer.set_deterministic(cfg.deterministic)
    seq = _sequence(cfg)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(dump_config(cfg))
    settings = trainer.AdaptSettings(cfg.adaptive, cfg.tau, cfg.probe, cfg.probe_epochs, cfg.probe_tolerance)
    run = trainer.finetune_baseline if cfg.method == "finetune" else trainer.run_sequence
    kwargs = {} if cfg.method == "finetune" else {"settings": settings}
    report = run(seq, cfg.plan(), cfg.train_config(), out_dir=out, checkpoints=cfg.checkpoints, **kwargs)
    summary = {
        "version": __version__,
        "config_hash": cfg.digest(),
        "seed": cfg.seed,
        "dataset": cfg.dataset,
        "partition": cfg.partition,
        "tasks": [
            {"task": t + 1, "classes": list(seq.task(t + 1).classes), "accuracy": acc,
             "per_task_accuracy": report.acc_matrix[t], "block_spec": report.specs[t],
             "parameter_count": report.param_counts[t]}
            for t, acc in enumerate(report.per_task_acc)
        ],
        "metrics": report.to_dict(),
    }
    (out / SUMMARY_NAME).write_text(json.dumps(summary, indent=2))
    report.final.write(out)
    print(f"average accuracy {report.avg_acc:.2f} over {len(report.per_task_acc)} tasks -> {out / SUMMARY_NAME}")
    return 0


def cmd_eval(checkpoint_path, config_path, split="test", out_dir=None) -> int:
    from blcl.checkpoint import load_model
    from blcl.evaluate import evaluate_after_task, final_report
    from blcl.metrics import write_embeddings_csv

    model, meta = load_model(checkpoint_path)
    cfg = load_config(config_path)
    model.to(cfg.device)
    seq = _sequence(cfg)
    t = int(meta["task_index"])
    if t > len(seq.tasks) or model.num_classes != len(seq.cumulative_labels(t)):
        raise ArtifactError(
            f"checkpoint head has {model.num_classes} classes; task {t} of this dataset has "
            f"{len(seq.cumulative_labels(t)) if t <= len(seq.tasks) else 'no'} cumulative classes")
    if split == "test":
        acc, per_task, pred = evaluate_after_task(model, seq, t)
    else:
        from blcl.evaluate import predict

        samples = [s for j in range(1, t + 1) for s in (seq.train_samples(j) if split == "train" else seq.val_samples(j))]
        if not samples:
            raise ConfigError(f"split {split!r} is empty for this dataset")
        pred = predict(model, samples, seq.cumulative_labels(t))
        acc = 100.0 * float((pred.preds == pred.labels).mean())
        per_task = None
    out = Path(out_dir) if out_dir else Path(checkpoint_path).with_suffix("").parent / f"eval_task{t}_{split}"
    report = final_report(per_task or [acc], pred, seq.cumulative_labels(t))
    report.write(out)
    write_embeddings_csv(pred.ids, pred.labels, pred.embeddings, out / "embeddings.csv")
    print(f"task {t} {split}: accuracy {acc:.2f} on {len(seq.cumulative_labels(t))} classes -> {out}")
    return 0


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k in ("task", "epoch") else float(v)) for k, v in row.items()}
                for row in csv.DictReader(fh)]


def sigma_figure(rows: list[dict], task: int):
    """sigma1/sigma2 against epoch for one task (loss terms on a twin axis)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = [r for r in rows if r["task"] == task]
    epochs = [r["epoch"] for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(epochs, [r["sigma1"] for r in rows], label="sigma1 (CE)")
    ax.plot(epochs, [r["sigma2"] for r in rows], label="sigma2 (CL)")
    ax.set_xlabel("epoch")
    ax.set_ylabel("sigma")
    ax.set_title(f"task {task}")
    ax2 = ax.twinx()
    ax2.plot(epochs, [r["l_ce"] for r in rows], "--", alpha=0.5, label="l_ce")
    ax2.plot(epochs, [r["l_cl"] for r in rows], ":", alpha=0.5, label="l_cl")
    ax2.set_ylabel("loss")
    ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    return fig


def accuracy_table(summary: dict) -> str:
    tasks = summary["tasks"]
    final = summary["metrics"]["final"]
    head = ["Method"] + [f"Task {t['task']} Acc." for t in tasks] + ["Avg Acc.", "F1", "F2", "DB", "CH"]

    def score(v):
        return "inf" if v.get("infinite") else f"{v['value']:.2f}"

    row = [summary["metrics"]["method"]] + [f"{t['accuracy']:.2f}" for t in tasks] + [
        f"{summary['metrics']['avg_acc']:.2f}", f"{final['f1']:.3f}", f"{final['f2']:.3f}",
        score(final["db_score"]), score(final["ch_score"])]
    lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head), "| " + " | ".join(row) + " |"]
    return "\n".join(lines) + "\n"


def cmd_report(run_dir) -> int:
    import matplotlib.pyplot as plt

    run_dir = Path(run_dir)
    summary_path = run_dir / SUMMARY_NAME
    metrics_path = run_dir / "metrics.csv"
    if not summary_path.exists() or not metrics_path.exists():
        raise ArtifactError(f"incomplete run directory {run_dir}: need {SUMMARY_NAME} and metrics.csv")
    try:
        summary = json.loads(summary_path.read_text())
        rows = read_metrics_csv(metrics_path)
    except (ValueError, KeyError) as exc:
        raise ArtifactError(f"unreadable run artifacts in {run_dir}: {exc}") from exc
    (run_dir / "accuracy_table.md").write_text(accuracy_table(summary))
    tasks = sorted({r["task"] for r in rows})
    for t in tasks:
        fig = sigma_figure(rows, t)
        fig.savefig(run_dir / f"sigma_task{t}.png", dpi=100)
        plt.close(fig)
    print(f"wrote accuracy_table.md and {len(tasks)} sigma plots to {run_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="blcl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("--threads", type=int, default=None, help="torch CPU threads")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train a task sequence from a config file")
    p.add_argument("config")
    p.add_argument("--output-dir", default=None)
    p.add_argument("--print-defaults", action="store_true", help="print the commented defaults and exit")

    p = sub.add_parser("eval", help="evaluate a checkpoint on the cumulative classes of its task")
    p.add_argument("checkpoint")
    p.add_argument("--config", required=True, help="config naming the dataset")
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--out", default=None)

    p = sub.add_parser("report", help="accuracy table and sigma plots for a finished run")
    p.add_argument("run_dir")

    p = sub.add_parser("print-defaults", help="print a commented default config")
    p.add_argument("--profile", default="full", choices=["full", "desk"])
    return parser


def main(argv=None) -> int:
    # `blcl run --print-defaults` needs no config file
    argv = list(sys.argv[1:] if argv is None else argv)
    if argv[:1] == ["run"] and "--print-defaults" in argv:
        sys.stdout.write(dump_config(defaults()))
        return 0
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    if args.threads:
        torch.set_num_threads(args.threads)
    try:
        if args.command == "run":
            return cmd_run(args.config, args.output_dir)
        if args.command == "eval":
            return cmd_eval(args.checkpoint, args.config, args.split, args.out)
        if args.command == "report":
            return cmd_report(args.run_dir)
        sys.stdout.write(dump_config(defaults(args.profile)))
        return 0
    except (ConfigError, ArtifactError, DivergenceError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
