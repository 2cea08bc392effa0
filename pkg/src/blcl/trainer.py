"""Sequential task training: loss assembly, sigma updates, freezing,
specialized-branch averaging and exemplar refresh."""

from __future__ import annotations

import copy
import csv
import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from blcl import adapt, backbone, checkpoint
from blcl.backbone import ArchitecturePlan, BlockSpec, BLCLNet
from blcl.config import TrainConfig
from blcl.data import AugmentationPolicy, LabeledImage, TaskSequence, augment_balance, batch_iterator
from blcl.errors import ArtifactError, DivergenceError
from blcl.evaluate import evaluate_after_task, final_report, predict
from blcl.losses import LossWeights, bayesian_total_loss, contrastive_loss, cross_entropy, form_pairs
from blcl.memory import ExemplarSet, update_exemplars, write_manifest
from blcl.metrics import MetricsReport

logger = logging.getLogger(__name__)

METRICS_COLUMNS = ["task", "epoch", "sigma1", "sigma2", "l_ce", "l_cl", "total"]
# norm floor for embeddings inside the training loss
EMBED_EPS = 1e-8


@dataclass
class AdaptSettings:
    enabled: bool = False
    tau: float = 0.5
    probe: bool = False
    probe_epochs: int = 5
    tolerance: float = adapt.DECLINE_TOLERANCE


@dataclass
class TaskResult:
    task_index: int
    per_epoch: list[dict]
    store: ExemplarSet
    spec: BlockSpec
    eval: dict = field(default_factory=dict)


@dataclass
class RunReport:
    method: str
    per_task_acc: list[float]
    acc_matrix: list[list[float]]  # row t: accuracy on each seen task's classes after task t
    specs: list[int]
    param_counts: list[int]
    sigma_log: list[dict]
    decisions: list[dict]
    final: MetricsReport | None = None
    model: BLCLNet | None = field(default=None, repr=False, compare=False)

    @property
    def avg_acc(self) -> float:
        return float(np.mean(self.per_task_acc))

    def progress(self) -> dict:
        """Per-task fields only (what a checkpoint needs to resume)."""
        names = ("method", "per_task_acc", "acc_matrix", "specs", "param_counts", "sigma_log", "decisions")
        return copy.deepcopy({n: getattr(self, n) for n in names})

    def to_dict(self):
        d = self.progress()
        d["avg_acc"] = self.avg_acc
        d["final"] = self.final.to_dict() if self.final else None
        return d


def task_seed(seed: int, t: int) -> int:
    return seed * 1000 + t


def set_deterministic(flag: bool = True) -> None:
    torch.use_deterministic_algorithms(flag, warn_only=True)
    torch.backends.cudnn.benchmark = False


def loss_terms(model, x, y_idx, cfg: TrainConfig):
    logits, emb = model(x)
    l_ce = cross_entropy(logits, y_idx)
    if cfg.weighting_mode == "ce_only":
        with torch.no_grad():
            l_cl = contrastive_loss(emb, form_pairs(y_idx), cfg.margin, cfg.squared_contrastive, EMBED_EPS)
    else:
        l_cl = contrastive_loss(emb, form_pairs(y_idx), cfg.margin, cfg.squared_contrastive, EMBED_EPS)
    return l_ce, l_cl


def combine(l_ce, l_cl, cfg: TrainConfig, weights: LossWeights):
    mode = cfg.weighting_mode
    if mode == "bayesian":
        return bayesian_total_loss(l_ce, l_cl, weights)
    if mode == "fixed":
        w_ce, w_cl = cfg.fixed_weights
        return w_ce * l_ce + w_cl * l_cl
    if mode == "ce_only":
        return l_ce
    return l_cl


def training_set(seq: TaskSequence, t: int, store: ExemplarSet | None, cfg: TrainConfig) -> list[LabeledImage]:
    """Current-task samples (optionally balanced) plus stored exemplars."""
    current = seq.train_samples(t)
    old = [seq.samples[i] for i in store.ids()] if store is not None and cfg.use_memory else []
    if cfg.balance_target:
        policy = AugmentationPolicy(target_per_class=cfg.balance_target)

        def balance(samples):
            out = []
            for c in sorted({s.label for s in samples}):
                out += augment_balance([s for s in samples if s.label == c], policy,
                                       task_seed(cfg.seed, t) * 100 + c)
            return out

        current = balance(current)
        if cfg.balance_old_classes and old:
            old = balance(old)
    return current + old


def _optimizer(model, weights, cfg: TrainConfig):
    params = [p for p in model.parameters() if p.requires_grad]
    if cfg.weighting_mode == "bayesian":
        params += list(weights.parameters())
    opt = torch.optim.Adam(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    milestones = sorted({max(1, int(round(f * cfg.epochs))) for f in cfg.lr_milestones if 0 < f < 1})
    sched = torch.optim.lr_scheduler.MultiStepLR(opt, milestones=milestones, gamma=cfg.lr_decay)
    return opt, sched


def fit(model: BLCLNet, samples, class_ids, cfg: TrainConfig, weights: LossWeights, seed: int,
        task_index: int = 0, epochs: int | None = None, snapshot_dir=None) -> list[dict]:
    """Optimize all trainable parameters (and sigma) on ``samples``; returns per-epoch rows."""
    index = {c: i for i, c in enumerate(class_ids)}
    opt, sched = _optimizer(model, weights, cfg)
    rows = []
    device = next(model.parameters()).device
    model.train()
    for epoch in range(1, (epochs or cfg.epochs) + 1):
        sums = np.zeros(3)
        n = 0
        for x, y in batch_iterator(samples, cfg.batch_size, shuffle=True, seed=seed * 10007 + epoch):
            y_idx = torch.tensor([index[int(v)] for v in y], device=device)
            l_ce, l_cl = loss_terms(model, x.to(device), y_idx, cfg)
            finite = bool(torch.isfinite(l_ce) and torch.isfinite(l_cl))
            total = combine(l_ce, l_cl, cfg, weights) if finite else None
            if total is None or not torch.isfinite(total):
                snap = None
                if snapshot_dir is not None:
                    snap = Path(snapshot_dir) / f"diverged_task{task_index}_epoch{epoch}.npz"
                    checkpoint.save_checkpoint(snap, model, task_index, {"diverged": True})
                raise DivergenceError(
                    f"non-finite loss at task {task_index} epoch {epoch} "
                    f"(l_ce={l_ce.item()}, l_cl={l_cl.item()})", snap)
            opt.zero_grad()
            total.backward()
            opt.step()
            sums += [l_ce.item(), l_cl.item(), total.item()]
            n += 1
        sched.step()
        means = sums / max(n, 1)
        rows.append({"task": task_index, "epoch": epoch, "sigma1": weights.sigma1, "sigma2": weights.sigma2,
                     "l_ce": float(means[0]), "l_cl": float(means[1]), "total": float(means[2])})
        logger.debug("task %d epoch %d %s", task_index, epoch, rows[-1])
    return rows


def refresh_exemplars(model: BLCLNet, seq: TaskSequence, t: int, store: ExemplarSet) -> ExemplarSet:
    feats = {}
    for c in seq.task(t).classes:
        samples = [s for s in seq.train_samples(t) if s.label == c]
        if not samples:
            continue
        p = predict(model, samples, range(model.num_classes))
        feats[c] = ([s.id for s in samples], p.embeddings)
    return update_exemplars(t, store, feats)


def train_task(model: BLCLNet, seq: TaskSequence, t: int, store: ExemplarSet, cfg: TrainConfig,
               weights: LossWeights, snapshot_dir=None) -> TaskResult:
    """Train task ``t`` on an already expanded and freeze-configured model.

    Afterwards the new branch is averaged with the previous one (when enabled)
    and the exemplar store is refreshed with herding on inference embeddings.
    """
    class_ids = seq.cumulative_labels(t)
    if model.num_classes != len(class_ids):
        raise ValueError(f"head has {model.num_classes} outputs for {len(class_ids)} classes")
    samples = training_set(seq, t, store, cfg)
    rows = fit(model, samples, class_ids, cfg, weights, task_seed(cfg.seed, t), t, snapshot_dir=snapshot_dir)
    if cfg.average_specialized and t >= 2:
        backbone.average_specialized_weights(model, include_running_stats=cfg.average_running_stats)
    if cfg.use_memory:
        store = refresh_exemplars(model, seq, t, store)
    return TaskResult(t, rows, store, model.task_specs[-1])


def _probe_split(seq: TaskSequence, t: int, seed: int):
    val = seq.val_samples(t)
    train = seq.train_samples(t)
    if val:
        return train, val
    order = np.random.default_rng(seed).permutation(len(train))
    cut = max(1, len(train) // 10)
    held = {int(i) for i in order[:cut]}
    return [s for i, s in enumerate(train) if i not in held], [train[i] for i in sorted(held)]


def make_probe(model: BLCLNet, seq: TaskSequence, t: int, store: ExemplarSet, cfg: TrainConfig,
               weights: LossWeights, epochs: int) -> Callable[[BlockSpec], float]:
    """Accuracy of a short fine-tune with a candidate spec, on a held-out slice of task t."""
    fit_set, held = _probe_split(seq, t, task_seed(cfg.seed, t))
    old = [seq.samples[i] for i in store.ids()] if cfg.use_memory else []
    class_ids = seq.cumulative_labels(t)

    def probe(spec: BlockSpec) -> float:
        trial = copy.deepcopy(model)
        backbone.expand_for_task(trial, t, len(seq.task(t).classes), spec, seed=task_seed(cfg.seed, t))
        backbone.set_trainable(trial, t)
        fit(trial, fit_set + old, class_ids, cfg, copy.deepcopy(weights), task_seed(cfg.seed, t) + 7,
            t, epochs=epochs)
        p = predict(trial, held, class_ids)
        return 100.0 * float((p.preds == p.labels).mean())

    return probe


def _old_prototypes(model, seq, t, store):
    by_class: dict[int, list[LabeledImage]] = {}
    if store.per_class:
        for c, ids in store.per_class.items():
            by_class[c] = [seq.samples[i] for i in ids]
    else:
        for j in range(1, t):
            for s in seq.train_samples(j):
                by_class.setdefault(s.label, []).append(s)
    return _prototypes(model, by_class)


def _prototypes(model, by_class):
    out = {}
    for c, samples in by_class.items():
        if samples:
            out[c] = torch.as_tensor(predict(model, samples, range(model.num_classes)).embeddings)
    return adapt.prototypes_from_embeddings(out)


def choose_spec(model, seq, t, store, cfg, weights, plan: ArchitecturePlan, settings: AdaptSettings):
    full = plan.per_task[t - 1].conv_layers
    if not settings.enabled:
        return plan.per_task[t - 1], None
    new = {}
    for s in seq.train_samples(t):
        new.setdefault(s.label, []).append(s)
    report = adapt.class_similarity(_prototypes(model, new), _old_prototypes(model, seq, t, store))
    probe = make_probe(model, seq, t, store, cfg, weights, settings.probe_epochs) if settings.probe else None
    decision = adapt.decide_block_spec(report, settings.tau, full, probe, settings.tolerance)
    return decision.spec, decision


def _write_metrics_csv(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRICS_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(r[k])) if k not in ("task", "epoch") else r[k]) for k in METRICS_COLUMNS})


def latest_checkpoint(out_dir) -> tuple[int, Path] | None:
    ck_dir = Path(out_dir) / "checkpoints"
    if not ck_dir.is_dir():
        return None
    found = []
    for p in ck_dir.glob("task_*.npz"):
        try:
            found.append((int(p.stem.split("_")[1]), p))
        except (IndexError, ValueError):
            continue
    return max(found) if found else None


def run_sequence(seq: TaskSequence, plan: ArchitecturePlan, cfg: TrainConfig,
                 settings: AdaptSettings | None = None, out_dir=None, method: str = "blcl",
                 image_size: int | None = None, resume: bool = True,
                 checkpoints: bool = True) -> RunReport:
    """Train every task in order, evaluating on all seen classes after each.

    With ``out_dir`` set, per-task checkpoints, exemplar manifests and the
    per-epoch metrics CSV are written there, and an existing checkpoint for
    task t makes the run resume at task t + 1.
    """
    settings = settings or AdaptSettings()
    if len(plan.per_task) != len(seq.tasks):
        raise ValueError(f"plan has {len(plan.per_task)} specs for {len(seq.tasks)} tasks")
    image_size = image_size or seq.image_shape[0]
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    report = RunReport(method, [], [], [], [], [], [])
    store = ExemplarSet(cfg.memory_budget)
    weights = LossWeights()
    model = None
    start = 1
    last_pred = None

    found = latest_checkpoint(out) if (out is not None and resume) else None
    if found is not None:
        t_done, path = found
        model, meta = checkpoint.load_model(path)
        model.to(cfg.device)
        try:
            saved = meta["run"]
            report = RunReport(**saved["report"])
            store = ExemplarSet.from_dict(saved["store"])
            weights = LossWeights(saved["log_sigma1"], saved["log_sigma2"])
        except KeyError as exc:
            raise ArtifactError(f"checkpoint {path} lacks run state: {exc}") from exc
        start = t_done + 1
        logger.info("resuming after task %d from %s", t_done, path)

    for t in range(start, len(seq.tasks) + 1):
        task = seq.task(t)
        decision = None
        if t == 1:
            model = backbone.build_model(plan, len(task.classes), task_seed(cfg.seed, t), image_size)
            model.to(cfg.device)
            spec = plan.per_task[0]
        else:
            spec, decision = choose_spec(model, seq, t, store, cfg, weights, plan, settings)
            backbone.expand_for_task(model, t, len(task.classes), spec, seed=task_seed(cfg.seed, t))
        backbone.set_trainable(model, t)
        if not cfg.persist_sigma:
            weights = LossWeights()
        weights.to(cfg.device)
        torch.manual_seed(task_seed(cfg.seed, t))

        result = train_task(model, seq, t, store, cfg, weights, snapshot_dir=out)
        store = result.store
        acc, per_group, last_pred = evaluate_after_task(model, seq, t)

        report.per_task_acc.append(acc)
        report.acc_matrix.append(per_group)
        report.specs.append(spec.conv_layers)
        report.param_counts.append(backbone.parameter_count(model))
        report.sigma_log.extend(result.per_epoch)
        report.decisions.append(decision.to_dict() if decision else {"chosen": spec.conv_layers})
        logger.info("task %d: accuracy %.2f per-task %s", t, acc, [round(a, 2) for a in per_group])

        if out is not None:
            _write_metrics_csv(out / "metrics.csv", report.sigma_log)
            write_manifest(store, out / f"exemplars_task{t}.csv")
            if checkpoints:
                run_state = {
                    "report": report.progress(),
                    "store": store.to_dict(),
                    "log_sigma1": weights.log_sigma1.item(),
                    "log_sigma2": weights.log_sigma2.item(),
                }
                checkpoint.save_checkpoint(out / "checkpoints" / f"task_{t}.npz", model, t, {"run": run_state})

    if last_pred is None:
        _, _, last_pred = evaluate_after_task(model, seq, len(seq.tasks))
    report.final = final_report(report.per_task_acc, last_pred, seq.cumulative_labels(len(seq.tasks)))
    report.model = model
    return report


def finetune_baseline(seq: TaskSequence, plan: ArchitecturePlan, cfg: TrainConfig, out_dir=None,
                      image_size: int | None = None, **kwargs) -> RunReport:
    """Same loop with no exemplars, no averaging and CE only."""
    cfg = dataclasses.replace(cfg, use_memory=False, average_specialized=False, weighting_mode="ce_only")
    return run_sequence(seq, plan, cfg, AdaptSettings(), out_dir, method="finetune",
                        image_size=image_size, **kwargs)
