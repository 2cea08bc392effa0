"""Experiment configuration: one flat YAML file per run."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import torch
import yaml

from blcl.backbone import ArchitecturePlan, region_capacity
from blcl.errors import ConfigError

WEIGHTING_MODES = ("bayesian", "fixed", "ce_only", "cl_only")
METHODS = ("blcl", "finetune")


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 128
    learning_rate: float = 0.1
    lr_decay: float = 0.1
    lr_milestones: tuple[float, ...] = (0.6, 0.8)
    weight_decay: float = 0.0
    average_specialized: bool = True
    average_running_stats: bool = True
    weighting_mode: str = "bayesian"
    fixed_weights: tuple[float, float] = (0.1, 0.9)  # (w_ce, w_cl)
    margin: float = 1.0
    squared_contrastive: bool = False
    use_memory: bool = True
    memory_budget: int = 2000
    balance_target: int | None = None
    balance_old_classes: bool = False
    persist_sigma: bool = True
    seed: int = 0
    device: str = "cpu"

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.weighting_mode not in WEIGHTING_MODES:
            raise ConfigError(f"weighting_mode must be one of {WEIGHTING_MODES}")
        if self.weighting_mode != "ce_only" and self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 when the contrastive loss is active")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        try:
            torch.device(self.device)
        except RuntimeError as exc:
            raise ConfigError(f"bad device {self.device!r}") from exc


# Commented defaults; full-scale values unless the desk profile overrides them.
FIELD_DOCS = {
    "profile": "full | desk; base preset the other keys override",
    "method": "blcl | finetune",
    "dataset": "cifar10 | cifar100 | imagenet100 | gnss | custom",
    "data_root": "dataset location; $BLCL_DATA_ROOT overrides",
    "partition": "classes per task",
    "class_order": "optional permutation of class ids",
    "train_per_class": "cap on training images per class (null = all)",
    "test_per_class": "cap on test images per class (null = all)",
    "image_size": "resize for directory datasets (null = native)",
    "backbone": "resnet32 | resnet18 | desk",
    "total_blocks": "specialized blocks per branch (l)",
    "block_spec": "final-region conv layers per task (s)",
    "epochs": "epochs per task",
    "batch_size": "mini-batch size",
    "learning_rate": "Adam learning rate",
    "lr_decay": "multiplicative decay at each milestone",
    "lr_milestones": "fractions of the epoch budget where lr decays",
    "weight_decay": "Adam weight decay",
    "average_specialized": "average the new branch with the previous one after each task",
    "average_running_stats": "include batch-norm running statistics in averaging",
    "weighting_mode": "bayesian | fixed | ce_only | cl_only",
    "fixed_weights": "[w_ce, w_cl] for weighting_mode fixed",
    "margin": "contrastive margin alpha",
    "squared_contrastive": "use squared distance / squared hinge terms",
    "memory_budget": "total exemplars E",
    "balance_target": "augment current-task classes up to this many samples (null = off)",
    "balance_old_classes": "also balance exemplar classes",
    "persist_sigma": "carry sigma values across tasks",
    "adaptive": "gate the final-region spec on class similarity",
    "tau": "similarity threshold",
    "probe": "search specs with short fine-tunes instead of a single-step reduction",
    "probe_epochs": "epochs per probe fine-tune",
    "probe_tolerance": "accuracy drop (points) treated as a decline",
    "output_dir": "run directory",
    "seed": "global seed",
    "deterministic": "force deterministic kernels",
    "checkpoints": "write per-task checkpoint archives",
    "device": "torch device for training and evaluation (cpu, cuda, cuda:1, ...)",
}


@dataclass
class ExperimentConfig:
    profile: str = "full"
    method: str = "blcl"
    dataset: str = "cifar10"
    data_root: str | None = None
    partition: list[int] = field(default_factory=lambda: [4, 2, 2, 2])
    class_order: list[int] | None = None
    train_per_class: int | None = None
    test_per_class: int | None = None
    image_size: int | None = None
    backbone: str = "resnet32"
    total_blocks: int = 8
    block_spec: list[int] = field(default_factory=lambda: [1, 1, 2, 2])
    epochs: int = 300
    batch_size: int = 128
    learning_rate: float = 0.1
    lr_decay: float = 0.1
    lr_milestones: list[float] = field(default_factory=lambda: [0.6, 0.8])
    weight_decay: float = 0.0
    average_specialized: bool = True
    average_running_stats: bool = True
    weighting_mode: str = "bayesian"
    fixed_weights: list[float] = field(default_factory=lambda: [0.1, 0.9])
    margin: float = 1.0
    squared_contrastive: bool = False
    memory_budget: int = 2000
    balance_target: int | None = None
    balance_old_classes: bool = False
    persist_sigma: bool = True
    adaptive: bool = False
    tau: float = 0.5
    probe: bool = False
    probe_epochs: int = 5
    probe_tolerance: float = 0.2
    output_dir: str = "runs/blcl"
    seed: int = 0
    deterministic: bool = True
    checkpoints: bool = True
    device: str = "cpu"

    def validate(self) -> "ExperimentConfig":
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}")
        if len(self.block_spec) != len(self.partition):
            raise ConfigError(
                f"block_spec has {len(self.block_spec)} entries for {len(self.partition)} tasks")
        if any(p < 1 for p in self.partition):
            raise ConfigError("partition entries must be >= 1")
        if self.partition[0] < 2:
            raise ConfigError("the first task needs at least two classes")
        cap = region_capacity(self.total_blocks) if self.total_blocks >= 1 else 0
        if any(not 0 <= s <= cap for s in self.block_spec):
            raise ConfigError(f"block_spec entries must lie in [0, {cap}] for total_blocks={self.total_blocks}")
        if len(self.fixed_weights) != 2:
            raise ConfigError("fixed_weights needs [w_ce, w_cl]")
        if not -1.0 < self.tau <= 1.0:
            raise ConfigError("tau must lie in (-1, 1]")
        self.plan()
        self.train_config()
        return self

    def plan(self) -> ArchitecturePlan:
        try:
            return ArchitecturePlan(self.total_blocks, list(self.block_spec), self.backbone)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            lr_decay=self.lr_decay,
            lr_milestones=tuple(self.lr_milestones),
            weight_decay=self.weight_decay,
            average_specialized=self.average_specialized,
            average_running_stats=self.average_running_stats,
            weighting_mode=self.weighting_mode,
            fixed_weights=tuple(self.fixed_weights),
            margin=self.margin,
            squared_contrastive=self.squared_contrastive,
            use_memory=self.memory_budget > 0,
            memory_budget=self.memory_budget,
            balance_target=self.balance_target,
            balance_old_classes=self.balance_old_classes,
            persist_sigma=self.persist_sigma,
            seed=self.seed,
            device=self.device,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


PROFILES = {
    "full": {},
    # CPU-sized smoke profile: small stem, two 512-wide specialized blocks.
    "desk": {
        "backbone": "desk",
        "total_blocks": 2,
        "block_spec": [4, 4, 3, 3],
        "epochs": 10,
        "batch_size": 32,
        "learning_rate": 1e-3,
        "train_per_class": 200,
        "test_per_class": 100,
        "memory_budget": 200,
    },
}

FIELD_NAMES = [f.name for f in dataclasses.fields(ExperimentConfig)]


def from_dict(values: dict) -> ExperimentConfig:
    values = dict(values or {})
    unknown = set(values) - set(FIELD_NAMES)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    profile = values.get("profile", "full")
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; expected one of {sorted(PROFILES)}")
    merged = {**PROFILES[profile], **values}
    try:
        cfg = ExperimentConfig(**merged)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg.validate()


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config not found: {path}")
    try:
        values = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if values is not None and not isinstance(values, dict):
        raise ConfigError(f"{path} must hold a flat key: value mapping")
    return from_dict(values)


def dump_config(cfg: ExperimentConfig, commented: bool = True) -> str:
    lines = []
    for name, value in cfg.to_dict().items():
        text = yaml.safe_dump({name: value}, default_flow_style=True, width=1000).strip()
        text = text[1:-1] if text.startswith("{") else text
        if commented and name in FIELD_DOCS:
            lines.append(f"# {FIELD_DOCS[name]}")
        lines.append(text)
    return "\n".join(lines) + "\n"


def defaults(profile: str = "full") -> ExperimentConfig:
    return from_dict({"profile": profile})
