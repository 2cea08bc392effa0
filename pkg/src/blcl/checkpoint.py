"""Per-task checkpoint archives.

Format (version 1): a NumPy ``.npz`` archive. Every tensor of the model's
``state_dict`` is stored under ``state/<name>``; the UTF-8 JSON metadata is
stored as a uint8 array under ``__meta__`` and holds at least
``format_version``, ``task_index``, ``plan``, ``task_specs``,
``task_classes`` and ``image_size``.
"""

from __future__ import annotations

import io
import json
import os
import zipfile
from pathlib import Path

import numpy as np
import torch

from blcl.backbone import ArchitecturePlan, BlockSpec, BLCLNet, rebuild
from blcl.errors import ArtifactError

FORMAT_VERSION = 1


def save_checkpoint(path, model: BLCLNet, task_index: int, extra: dict | None = None) -> None:
    meta = {
        "format_version": FORMAT_VERSION,
        "task_index": task_index,
        "plan": model.plan.to_dict(),
        "task_specs": [s.conv_layers for s in model.task_specs],
        "task_classes": list(model.task_classes),
        "image_size": model.image_size,
        **(extra or {}),
    }
    arrays = {f"state/{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    tmp = path.with_suffix(".tmp")
    tmp.write_bytes(buf.getvalue())
    os.replace(tmp, path)


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    try:
        with np.load(path, allow_pickle=False) as archive:
            meta = json.loads(bytes(archive["__meta__"]).decode())
            state = {k[len("state/"):]: archive[k] for k in archive.files if k.startswith("state/")}
    except FileNotFoundError as exc:
        raise ArtifactError(f"checkpoint not found: {path}") from exc
    except (OSError, ValueError, KeyError, zipfile.BadZipFile, EOFError, json.JSONDecodeError) as exc:
        raise ArtifactError(f"corrupted checkpoint {path}: {exc}") from exc
    if meta.get("format_version") != FORMAT_VERSION:
        raise ArtifactError(f"unsupported checkpoint version {meta.get('format_version')}")
    return state, meta


def load_model(path) -> tuple[BLCLNet, dict]:
    state, meta = read_checkpoint(path)
    try:
        plan = ArchitecturePlan.from_dict(meta["plan"])
        model = rebuild(plan, [BlockSpec(s) for s in meta["task_specs"]], meta["task_classes"],
                        meta.get("image_size", 32))
        model.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in state.items()}, strict=True)
    except (KeyError, RuntimeError, ValueError) as exc:
        raise ArtifactError(f"checkpoint {path} does not match its architecture: {exc}") from exc
    return model, meta
