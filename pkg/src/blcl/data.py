"""Task streams, dataset ingestion, class balancing and batching."""

from __future__ import annotations

import logging
import os
import pickle
import tarfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
from torchvision.transforms import v2

from blcl.errors import DataError

logger = logging.getLogger(__name__)

DATASETS = ("cifar10", "cifar100", "imagenet100", "gnss", "custom")
NUM_CLASSES = {"cifar10": 10, "cifar100": 100, "imagenet100": 100, "gnss": 11}
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}
MANIFEST_NAME = ".blcl_manifest.tsv"
DATA_ROOT_ENV = "BLCL_DATA_ROOT"
# train / val / test fractions for datasets without a canonical split
RATIO_SPLIT = (0.64, 0.16, 0.20)


@dataclass(frozen=True)
class LabeledImage:
    pixels: np.ndarray  # H x W x C, float32 in [0, 1]
    label: int
    id: str


@dataclass(frozen=True)
class TaskSpec:
    index: int  # 1-based
    classes: tuple[int, ...]
    train_ids: tuple[str, ...]
    test_ids: tuple[str, ...]
    val_ids: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.classes:
            raise ValueError(f"task {self.index} has no classes")
        if set(self.train_ids) & set(self.test_ids):
            raise ValueError(f"task {self.index}: train and test ids overlap")


@dataclass
class DatasetSplits:
    train: list[LabeledImage]
    test: list[LabeledImage]
    val: list[LabeledImage] = field(default_factory=list)
    num_classes: int = 0

    def __post_init__(self):
        if not self.num_classes:
            labels = {s.label for s in self.train} | {s.label for s in self.test}
            self.num_classes = max(labels) + 1 if labels else 0


@dataclass
class TaskSequence:
    tasks: list[TaskSpec]
    samples: dict[str, LabeledImage]
    num_classes: int

    def __len__(self):
        return len(self.tasks)

    def cumulative_labels(self, t: int) -> list[int]:
        """Labels of tasks 1..t, in task order."""
        out: list[int] = []
        for task in self.tasks[:t]:
            out.extend(task.classes)
        return out

    def task(self, t: int) -> TaskSpec:
        return self.tasks[t - 1]

    def train_samples(self, t: int) -> list[LabeledImage]:
        return [self.samples[i] for i in self.task(t).train_ids]

    def val_samples(self, t: int) -> list[LabeledImage]:
        return [self.samples[i] for i in self.task(t).val_ids]

    def test_samples(self, t: int, cumulative: bool = True) -> list[LabeledImage]:
        tasks = self.tasks[:t] if cumulative else [self.task(t)]
        return [self.samples[i] for task in tasks for i in task.test_ids]

    @property
    def image_shape(self) -> tuple[int, ...]:
        return next(iter(self.samples.values())).pixels.shape


@dataclass(frozen=True)
class AugmentationPolicy:
    target_per_class: int = 1000
    brightness: float = 0.5
    hue: float = 0.3
    blur_kernel: tuple[int, int] = (5, 9)
    blur_sigma: tuple[float, float] = (0.1, 5.0)
    sharpness_factor: float = 2.0
    sharpness_prob: float = 0.5
    flip_prob: float = 0.4

    def __post_init__(self):
        if self.target_per_class < 1:
            raise ValueError("target_per_class must be >= 1")
        for p in (self.flip_prob, self.sharpness_prob):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"probability out of range: {p}")

    def pipeline(self) -> v2.Compose:
        return v2.Compose([
            v2.ColorJitter(brightness=self.brightness, hue=self.hue),
            v2.GaussianBlur(kernel_size=self.blur_kernel, sigma=self.blur_sigma),
            v2.RandomAdjustSharpness(self.sharpness_factor, p=self.sharpness_prob),
            v2.RandomHorizontalFlip(self.flip_prob),
            v2.RandomVerticalFlip(self.flip_prob),
        ])


# ---------------------------------------------------------------------------
# ingestion
# ---------------------------------------------------------------------------

def resolve_root(root: str | os.PathLike | None) -> Path:
    env = os.environ.get(DATA_ROOT_ENV)
    if env:
        root = env
    if root is None:
        raise DataError(f"dataset not found: no data root given and ${DATA_ROOT_ENV} unset")
    path = Path(root).expanduser()
    if not path.exists():
        raise DataError(f"dataset not found: {path}")
    return path


def _cifar_from_arrays(data, labels, prefix):
    images = np.asarray(data, dtype=np.uint8).reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    images = images.astype(np.float32) / 255.0
    return [LabeledImage(img, int(y), f"{prefix}-{i:05d}") for i, (img, y) in enumerate(zip(images, labels))]


def _find_cifar(root: Path, dataset_id: str) -> Path:
    names = {
        "cifar10": ["cifar-10-batches-py", "cifar-10-batches-bin", "cifar-10-python.tar.gz",
                    "cifar-10-binary.tar.gz"],
        "cifar100": ["cifar-100-python", "cifar-100-binary", "cifar-100-python.tar.gz",
                     "cifar-100-binary.tar.gz"],
    }[dataset_id]
    if root.is_file() or root.name in names:
        return root
    for name in names:
        if (root / name).exists():
            return root / name
    raise DataError(f"dataset not found: no {dataset_id} archive under {root}")


def _read_member(location: Path, member: str) -> bytes:
    if location.is_dir():
        return (location / member).read_bytes()
    with tarfile.open(location) as tar:
        for info in tar.getmembers():
            if info.name.endswith("/" + member) or info.name == member:
                return tar.extractfile(info).read()
    raise DataError(f"{member} missing from {location}")


def load_cifar(root: Path, dataset_id: str) -> DatasetSplits:
    """Read the python-pickle or binary CIFAR distributions, as a directory or a tar.gz."""
    location = _find_cifar(root, dataset_id)
    binary = "bin" in location.name
    ten = dataset_id == "cifar10"
    if ten:
        train_members = [f"data_batch_{i}" for i in range(1, 6)]
        test_members = ["test_batch"]
    else:
        train_members, test_members = ["train"], ["test"]
    if binary:
        train_members = [m + ".bin" for m in train_members]
        test_members = [m + ".bin" for m in test_members]

    def read(members):
        data, labels = [], []
        for member in members:
            raw = _read_member(location, member)
            if binary:
                width = 1 if ten else 2
                rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, width + 3072)
                labels.extend(rec[:, width - 1].tolist())
                data.append(rec[:, width:])
            else:
                batch = pickle.loads(raw, encoding="bytes")
                data.append(np.asarray(batch[b"data"]))
                labels.extend(batch[b"labels" if ten else b"fine_labels"])
        return np.concatenate(data), labels

    try:
        tr_x, tr_y = read(train_members)
        te_x, te_y = read(test_members)
    except (OSError, KeyError, ValueError, pickle.UnpicklingError, tarfile.TarError) as exc:
        raise DataError(f"cannot read {dataset_id} from {location}: {exc}") from exc
    return DatasetSplits(
        train=_cifar_from_arrays(tr_x, tr_y, "train"),
        test=_cifar_from_arrays(te_x, te_y, "test"),
        num_classes=NUM_CLASSES[dataset_id],
    )


def _class_ids(names: Sequence[str]) -> dict[str, int]:
    if all(n.isdigit() for n in names):
        return {n: int(n) for n in names}
    return {n: i for i, n in enumerate(sorted(names))}


def _scan_tree(root: Path, split_dirs: dict[str, str]) -> list[tuple[str, str, int, str]]:
    rows = []
    for split, dirname in split_dirs.items():
        base = root / dirname if dirname else root
        classes = sorted(p.name for p in base.iterdir() if p.is_dir() and not p.name.startswith("."))
        ids = _class_ids(classes)
        for cls in classes:
            for f in sorted((base / cls).iterdir()):
                if f.suffix.lower() in IMAGE_SUFFIXES:
                    rel = f.relative_to(root).as_posix()
                    rows.append((rel, rel, ids[cls], split))
    return rows


def build_manifest(root: Path) -> list[tuple[str, str, int, str]]:
    """Index a directory-per-class tree; split is 'train'/'test'/'val' or '*' (unsplit)."""
    if (root / "train").is_dir():
        split_dirs = {"train": "train"}
        for name in ("test", "val"):
            if (root / name).is_dir():
                split_dirs[name] = name
    else:
        split_dirs = {"*": ""}
    rows = _scan_tree(root, split_dirs)
    if not rows:
        raise DataError(f"dataset not found: no images under {root}")
    return rows


def load_manifest(root: Path) -> list[tuple[str, str, int, str]]:
    """Read the cached manifest, regenerating it when absent."""
    path = root / MANIFEST_NAME
    if path.exists():
        rows = []
        for line in path.read_text().splitlines():
            if line and not line.startswith("#"):
                sid, rel, label, split = line.split("\t")
                rows.append((sid, rel, int(label), split))
        return rows
    rows = build_manifest(root)
    try:
        with open(path, "w") as fh:
            fh.write("# id\tpath\tlabel\tsplit\n")
            for row in rows:
                fh.write("\t".join(map(str, row)) + "\n")
    except OSError:
        logger.warning("could not write manifest cache to %s", path)
    return rows


def _read_image(path: Path, image_size: int | None) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        im = im.convert("RGB")
        if image_size and im.size != (image_size, image_size):
            im = im.resize((image_size, image_size), Image.BILINEAR)
        return np.asarray(im, dtype=np.float32) / 255.0


def _ratio_split(rows, seed):
    """Per-class seeded 64/16/20 split."""
    rng = np.random.default_rng(seed)
    by_class: dict[int, list] = {}
    for row in rows:
        by_class.setdefault(row[2], []).append(row)
    out = {"train": [], "val": [], "test": []}
    for label in sorted(by_class):
        items = by_class[label]
        order = rng.permutation(len(items))
        n = len(items)
        n_train = int(round(RATIO_SPLIT[0] * n))
        n_val = int(round(RATIO_SPLIT[1] * n))
        if n >= 3:
            n_train = min(max(n_train, 1), n - 2)
            n_val = min(max(n_val, 1), n - n_train - 1)
        for rank, j in enumerate(order):
            split = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
            out[split].append(items[j])
    return out


def load_image_tree(root: Path, image_size: int | None = None, seed: int = 0) -> DatasetSplits:
    rows = load_manifest(root)
    if any(r[3] == "*" for r in rows):
        grouped = _ratio_split(rows, seed)
    else:
        grouped = {s: [r for r in rows if r[3] == s] for s in ("train", "val", "test")}

    def materialize(items):
        return [LabeledImage(_read_image(root / rel, image_size), label, sid) for sid, rel, label, _ in items]

    return DatasetSplits(
        train=materialize(grouped["train"]),
        val=materialize(grouped["val"]),
        test=materialize(grouped["test"]),
    )


def load_dataset(dataset_id: str, root=None, *, image_size: int | None = None, seed: int = 0) -> DatasetSplits:
    if dataset_id not in DATASETS:
        raise DataError(f"unknown dataset_id {dataset_id!r}; expected one of {DATASETS}")
    path = resolve_root(root)
    if dataset_id in ("cifar10", "cifar100"):
        return load_cifar(path, dataset_id)
    splits = load_image_tree(path, image_size=image_size, seed=seed)
    if dataset_id in NUM_CLASSES:
        splits.num_classes = NUM_CLASSES[dataset_id]
    return splits


# ---------------------------------------------------------------------------
# task streams
# ---------------------------------------------------------------------------

def _cap_per_class(samples, cap, rng):
    if cap is None:
        return list(samples)
    by_class: dict[int, list[LabeledImage]] = {}
    for s in samples:
        by_class.setdefault(s.label, []).append(s)
    kept = set()
    for label in sorted(by_class):
        items = by_class[label]
        for j in sorted(rng.permutation(len(items))[:cap]):
            kept.add(items[j].id)
    return [s for s in samples if s.id in kept]


def build_task_sequence(
    dataset_id: str,
    partition: Sequence[int],
    seed: int,
    *,
    root=None,
    splits: DatasetSplits | None = None,
    class_order: Sequence[int] | None = None,
    train_per_class: int | None = None,
    test_per_class: int | None = None,
    image_size: int | None = None,
) -> TaskSequence:
    """Split a dataset into class-disjoint tasks.

    ``partition[t]`` classes go to task t+1, taken in ascending label order or in
    ``class_order`` when supplied. ``train_per_class``/``test_per_class`` cap each
    class with a seeded draw. Pass ``splits`` to skip ingestion.
    """
    if dataset_id not in DATASETS:
        raise DataError(f"unknown dataset_id {dataset_id!r}; expected one of {DATASETS}")
    if not partition or any(int(p) < 1 for p in partition):
        raise DataError(f"partition entries must be >= 1: {list(partition)}")
    if splits is None:
        splits = load_dataset(dataset_id, root, image_size=image_size, seed=seed)
    num_classes = splits.num_classes
    if sum(partition) != num_classes:
        raise DataError(f"partition sums to {sum(partition)} but dataset has {num_classes} classes")

    order = list(range(num_classes)) if class_order is None else [int(c) for c in class_order]
    if sorted(order) != list(range(num_classes)):
        raise DataError("class_order must be a permutation of all class ids")

    rng = np.random.default_rng(seed)
    train = _cap_per_class(splits.train, train_per_class, rng)
    test = _cap_per_class(splits.test, test_per_class, rng)
    val = splits.val

    samples = {s.id: s for s in (*train, *val, *test)}
    if len(samples) != len(train) + len(val) + len(test):
        raise DataError("duplicate sample ids across splits")

    tasks, start = [], 0
    for t, n in enumerate(partition, start=1):
        classes = tuple(order[start:start + n])
        start += n
        members = set(classes)
        tasks.append(TaskSpec(
            index=t,
            classes=classes,
            train_ids=tuple(s.id for s in train if s.label in members),
            test_ids=tuple(s.id for s in test if s.label in members),
            val_ids=tuple(s.id for s in val if s.label in members),
        ))
    return TaskSequence(tasks=tasks, samples=samples, num_classes=num_classes)


def augment_balance(samples: Sequence[LabeledImage], policy: AugmentationPolicy, seed: int) -> list[LabeledImage]:
    """Pad one class up to ``policy.target_per_class`` with augmented copies.

    Originals come first and unchanged; each synthesized image transforms a
    randomly drawn original through the full jitter/blur/sharpness/flip pipeline.
    """
    if not samples:
        raise ValueError("augment_balance needs at least one sample")
    out = list(samples)
    missing = policy.target_per_class - len(out)
    if missing <= 0:
        return out
    label = samples[0].label
    pipeline = policy.pipeline()
    rng = np.random.default_rng(seed)
    picks = rng.integers(0, len(samples), size=missing)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        for k, j in enumerate(picks):
            src = samples[j]
            x = torch.from_numpy(np.ascontiguousarray(src.pixels)).permute(2, 0, 1)
            y = pipeline(x).clamp(0.0, 1.0).permute(1, 2, 0).numpy().astype(np.float32)
            out.append(LabeledImage(y, label, f"{src.id}#aug{k}"))
    return out


def batch_iterator(
    split: Sequence[LabeledImage], batch_size: int, shuffle: bool = False, seed: int = 0
) -> Iterator[tuple[torch.Tensor, torch.Tensor]]:
    """Yield (N x C x H x W float tensor, label tensor) batches; last batch may be short."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.random.default_rng(seed).permutation(len(split)) if shuffle else np.arange(len(split))
    for start in range(0, len(split), batch_size):
        chunk = [split[i] for i in order[start:start + batch_size]]
        x = np.stack([s.pixels for s in chunk]).transpose(0, 3, 1, 2)
        yield torch.from_numpy(np.ascontiguousarray(x)), torch.tensor([s.label for s in chunk])
