"""Generalized + specialized ResNet with per-task specialized branches.

The generalized stem is shared by all tasks. Every task owns a specialized
branch of ``total_blocks`` residual blocks (two 3x3 convs + two batch norms
each) ending in 512 channels. Only the newest branch runs in ``forward``;
older branches stay frozen so they can be averaged into the newest one.

The last (up to) two blocks of a branch form its *final region*. A
``BlockSpec`` keeps ``conv_layers`` of the region's convs in order, so a
removed conv drops the residual path and leaves only the shortcut.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import torch
from torch import nn
from torch.nn import functional as F

EMBEDDING_DIM = 512
BACKBONES = ("resnet32", "resnet18", "desk")


@dataclass(frozen=True)
class BlockSpec:
    conv_layers: int

    def __post_init__(self):
        if not 0 <= self.conv_layers <= 4:
            raise ValueError(f"conv_layers must be in [0, 4], got {self.conv_layers}")


@dataclass
class ArchitecturePlan:
    total_blocks: int
    per_task: list[BlockSpec]
    backbone: str = "resnet32"
    embedding_dim: int = EMBEDDING_DIM
    generalized_conv_layers: int = 13

    def __post_init__(self):
        self.per_task = [s if isinstance(s, BlockSpec) else BlockSpec(int(s)) for s in self.per_task]
        if self.total_blocks < 1:
            raise ValueError("total_blocks must be >= 1")
        if self.embedding_dim != EMBEDDING_DIM:
            raise ValueError("embedding_dim is fixed at 512")
        if self.backbone not in BACKBONES:
            raise ValueError(f"unknown backbone {self.backbone!r}")
        if self.backbone == "desk":
            self.generalized_conv_layers = 5
        cap = region_capacity(self.total_blocks)
        for spec in self.per_task:
            if spec.conv_layers > cap:
                raise ValueError(f"spec {spec.conv_layers} exceeds final-region capacity {cap}")

    def to_dict(self):
        return {
            "total_blocks": self.total_blocks,
            "per_task": [s.conv_layers for s in self.per_task],
            "backbone": self.backbone,
            "embedding_dim": self.embedding_dim,
            "generalized_conv_layers": self.generalized_conv_layers,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["total_blocks"], list(d["per_task"]), d.get("backbone", "resnet32"))


def region_capacity(total_blocks: int) -> int:
    return 2 * min(2, total_blocks)


def block_conv_counts(total_blocks: int, conv_layers: int) -> list[int]:
    """Convs kept per block when the final region retains ``conv_layers``."""
    cap = region_capacity(total_blocks)
    if not 0 <= conv_layers <= cap:
        raise ValueError(f"spec {conv_layers} exceeds final-region capacity {cap}")
    region = min(2, total_blocks)
    counts = [2] * (total_blocks - region)
    remaining = conv_layers
    for _ in range(region):
        counts.append(min(2, remaining))
        remaining -= counts[-1]
    return counts


class ResidualBlock(nn.Module):
    """Basic residual block; ``n_convs`` < 2 truncates the residual path."""

    def __init__(self, in_ch, out_ch, stride=1, n_convs=2):
        super().__init__()
        self.n_convs = n_convs
        if n_convs >= 1:
            self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride, 1, bias=False)
            self.bn1 = nn.BatchNorm2d(out_ch)
        if n_convs >= 2:
            self.conv2 = nn.Conv2d(out_ch, out_ch, 3, 1, 1, bias=False)
            self.bn2 = nn.BatchNorm2d(out_ch)
        self.shortcut = nn.Sequential()
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride, bias=False),
                nn.BatchNorm2d(out_ch),
            )

    def forward(self, x):
        identity = self.shortcut(x)
        if self.n_convs == 0:
            return F.relu(identity)
        out = self.bn1(self.conv1(x))
        if self.n_convs == 2:
            out = self.bn2(self.conv2(F.relu(out)))
        return F.relu(out + identity)


def _stage(in_ch, out_ch, n_blocks, stride):
    blocks = [ResidualBlock(in_ch, out_ch, stride)]
    blocks += [ResidualBlock(out_ch, out_ch) for _ in range(n_blocks - 1)]
    return blocks


def make_generalized(backbone: str, image_size: int = 32) -> tuple[nn.Sequential, int, int]:
    """Return (stem, out_channels, stride of the first specialized block)."""
    if backbone == "resnet32":
        # 1 + 3 stages x 2 blocks x 2 convs = 13 convs
        layers = [nn.Conv2d(3, 16, 3, 1, 1, bias=False), nn.BatchNorm2d(16), nn.ReLU()]
        layers += _stage(16, 16, 2, 1) + _stage(16, 32, 2, 2) + _stage(32, 64, 2, 2)
        return nn.Sequential(*layers), 64, 1
    if backbone == "resnet18":
        if image_size <= 64:
            layers = [nn.Conv2d(3, 64, 3, 1, 1, bias=False), nn.BatchNorm2d(64), nn.ReLU()]
        else:
            layers = [nn.Conv2d(3, 64, 7, 2, 3, bias=False), nn.BatchNorm2d(64), nn.ReLU(),
                      nn.MaxPool2d(3, 2, 1)]
        layers += _stage(64, 64, 2, 1) + _stage(64, 128, 2, 2) + _stage(128, 256, 2, 2)
        return nn.Sequential(*layers), 256, 2
    if backbone == "desk":
        layers = [nn.Conv2d(3, 32, 3, 1, 1, bias=False), nn.BatchNorm2d(32), nn.ReLU()]
        layers += _stage(32, 64, 1, 2) + _stage(64, 128, 1, 2)
        return nn.Sequential(*layers), 128, 2
    raise ValueError(f"unknown backbone {backbone!r}")


class SpecializedBranch(nn.Module):
    def __init__(self, in_ch, total_blocks, spec: BlockSpec, stride=1):
        super().__init__()
        self.spec = spec
        counts = block_conv_counts(total_blocks, spec.conv_layers)
        blocks = []
        for i, n in enumerate(counts):
            blocks.append(ResidualBlock(in_ch if i == 0 else EMBEDDING_DIM, EMBEDDING_DIM,
                                        stride if i == 0 else 1, n))
        self.blocks = nn.Sequential(*blocks)

    def forward(self, x):
        return self.blocks(x)


class BLCLNet(nn.Module):
    def __init__(self, plan: ArchitecturePlan, initial_classes: int, image_size: int = 32):
        super().__init__()
        self.plan = plan
        self.image_size = image_size
        self.generalized, self._stem_ch, self._stride = make_generalized(plan.backbone, image_size)
        self.specialized = nn.ModuleList(
            [SpecializedBranch(self._stem_ch, plan.total_blocks, plan.per_task[0], self._stride)]
        )
        self.head = nn.Linear(EMBEDDING_DIM, initial_classes)
        self.task_specs: list[BlockSpec] = [plan.per_task[0]]
        self.task_classes: list[int] = [initial_classes]

    @property
    def num_tasks(self):
        return len(self.specialized)

    @property
    def num_classes(self):
        return self.head.out_features

    def embed(self, x):
        h = self.specialized[-1](self.generalized(x))
        return torch.flatten(F.adaptive_avg_pool2d(h, 1), 1)

    def forward(self, x):
        emb = self.embed(x)
        return self.head(emb), emb


def build_model(plan: ArchitecturePlan, initial_classes: int, seed: int, image_size: int = 32) -> BLCLNet:
    if initial_classes < 2:
        raise ValueError("initial_classes must be >= 2")
    if not plan.per_task:
        raise ValueError("plan has no per-task specs")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return BLCLNet(plan, initial_classes, image_size)


def expand_for_task(model: BLCLNet, task_index: int, new_classes: int, spec: BlockSpec,
                    seed: int | None = None) -> BLCLNet:
    """Add the branch for ``task_index`` and widen the head, in place.

    The new branch copies every previous-branch tensor whose name and shape
    match; the rest keep their fresh initialization. Old head rows are copied
    verbatim.
    """
    if task_index < 2:
        raise ValueError("expand_for_task starts at task 2")
    if task_index != model.num_tasks + 1:
        raise ValueError(f"model holds {model.num_tasks} tasks; cannot expand to task {task_index}")
    if new_classes < 1:
        raise ValueError("new_classes must be >= 1")
    cap = region_capacity(model.plan.total_blocks)
    if spec.conv_layers > cap:
        raise ValueError(f"spec {spec.conv_layers} exceeds final-region capacity {cap}")

    with torch.random.fork_rng(devices=[]):
        if seed is not None:
            torch.manual_seed(seed)
        branch = SpecializedBranch(model._stem_ch, model.plan.total_blocks, spec, model._stride)
        old_head = model.head
        head = nn.Linear(EMBEDDING_DIM, old_head.out_features + new_classes)

    prev = model.specialized[-1].state_dict()
    state = branch.state_dict()
    for name, tensor in state.items():
        if name in prev and prev[name].shape == tensor.shape:
            state[name] = prev[name].clone()
    branch.load_state_dict(state)

    with torch.no_grad():
        head.weight[: old_head.out_features] = old_head.weight
        head.bias[: old_head.out_features] = old_head.bias
    ref = next(model.parameters())
    model.specialized.append(branch.to(ref.device))
    model.head = head.to(ref.device)
    model.task_specs.append(spec)
    model.task_classes.append(new_classes)
    return model


def set_trainable(model: BLCLNet, task_index: int) -> BLCLNet:
    """Freeze branches of tasks before ``task_index``; everything else trains."""
    if task_index < 1:
        raise ValueError("task_index must be >= 1")
    for p in model.parameters():
        p.requires_grad_(True)
    for branch in model.specialized[: task_index - 1]:
        for p in branch.parameters():
            p.requires_grad_(False)
    return model


def frozen_flags(model: BLCLNet) -> dict[str, bool]:
    return {name: not p.requires_grad for name, p in model.named_parameters()}


def average_specialized_weights(model_t: BLCLNet, model_prev: BLCLNet | None = None,
                                include_running_stats: bool = True) -> BLCLNet:
    """Average the newest branch of ``model_t`` with the newest branch of ``model_prev``.

    With ``model_prev`` omitted, the previous branch held inside ``model_t``
    is used. Names missing on either side are skipped; a shared name with a
    different shape raises. Generalized and head parameters are untouched.
    """
    if model_prev is None:
        if model_t.num_tasks < 2:
            raise ValueError("model has no previous branch to average with")
        prev_branch = model_t.specialized[-2]
    else:
        prev_branch = model_prev.specialized[-1]
    cur = model_t.specialized[-1]
    prev_state = prev_branch.state_dict()
    new_state = cur.state_dict()
    param_names = {n for n, _ in cur.named_parameters()}
    for name, tensor in new_state.items():
        if name not in prev_state:
            continue
        other = prev_state[name]
        if other.shape != tensor.shape:
            raise ValueError(f"shape mismatch on {name}: {tuple(tensor.shape)} vs {tuple(other.shape)}")
        if name not in param_names:
            if not include_running_stats or not tensor.is_floating_point():
                continue
        new_state[name] = (tensor + other) / 2
    cur.load_state_dict(new_state)
    return model_t


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def clone(model: BLCLNet) -> BLCLNet:
    return copy.deepcopy(model)


def rebuild(plan: ArchitecturePlan, task_specs, task_classes, image_size=32) -> BLCLNet:
    """Recreate the module layout of a model trained through ``len(task_specs)`` tasks."""
    model = BLCLNet(
        ArchitecturePlan(plan.total_blocks, [task_specs[0], *plan.per_task[1:]], plan.backbone),
        task_classes[0], image_size,
    )
    model.plan = plan
    for t, (spec, n) in enumerate(zip(task_specs[1:], task_classes[1:]), start=2):
        expand_for_task(model, t, n, spec)
    return model
