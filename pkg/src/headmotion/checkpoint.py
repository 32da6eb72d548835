"""Checkpoint directories: one f32 tensor file per parameter plus a JSON manifest."""

from __future__ import annotations

import json
import shutil
from pathlib import Path

import numpy as np
import torch

from headmotion.io import load_tensor, save_tensor

MANIFEST = "manifest.json"


def save_checkpoint(directory: str | Path, tensors: dict[str, torch.Tensor], meta: dict) -> Path:
    """Write ``tensors`` and ``meta`` to ``directory``, replacing it atomically."""
    directory = Path(directory)
    tmp = directory.with_name(directory.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    (tmp / "tensors").mkdir(parents=True)
    entries = []
    for i, (name, t) in enumerate(tensors.items()):
        arr = t.detach().cpu().to(torch.float32).numpy()
        save_tensor(arr, tmp / "tensors" / f"{i:04d}")
        entries.append({"name": name, "file": f"tensors/{i:04d}.f32", "shape": list(arr.shape)})
    manifest = dict(meta)
    manifest["tensors"] = entries
    (tmp / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="ascii")
    if directory.exists():
        shutil.rmtree(directory)
    tmp.rename(directory)
    return directory


def load_checkpoint(directory: str | Path) -> tuple[dict[str, torch.Tensor], dict]:
    directory = Path(directory)
    mpath = directory / MANIFEST
    if not mpath.is_file():
        raise FileNotFoundError(f"no checkpoint at {directory} (missing {MANIFEST})")
    manifest = json.loads(mpath.read_text(encoding="ascii"))
    tensors = {}
    for e in manifest.pop("tensors"):
        arr = load_tensor(directory / e["file"])
        if list(arr.shape) != e["shape"]:
            raise ValueError(f"{directory}: tensor {e['name']} has shape {arr.shape}, manifest says {e['shape']}")
        tensors[e["name"]] = torch.from_numpy(np.array(arr))
    return tensors, manifest
