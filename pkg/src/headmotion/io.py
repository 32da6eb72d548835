"""Pose CSV, raw f32 tensor and dataset-manifest readers/writers."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from headmotion.core import CHANNELS, ConditionBundle, PoseFormatError, PoseSequence

CSV_HEADER = "frame," + ",".join(CHANNELS)


def _fmt(v: float) -> str:
    return format(float(v), ".9g")


def save_pose_sequence(seq: PoseSequence, path: str | Path) -> None:
    """Write ``seq`` as Pose CSV (9 significant digits per value)."""
    if seq is None or seq.values.size == 0:
        raise PoseFormatError("refusing to write an empty pose sequence")
    seq.validate()
    if seq.D != len(CHANNELS):
        raise PoseFormatError(f"Pose CSV stores {len(CHANNELS)} channels, sequence has {seq.D}")
    lines = [f"# fps={int(seq.fps)}", CSV_HEADER]
    for i, row in enumerate(seq.values):
        lines.append(",".join([str(i)] + [_fmt(v) for v in row]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def load_pose_sequence(path: str | Path) -> PoseSequence:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"pose file not found: {path}")
    lines = path.read_text(encoding="ascii").splitlines()
    if len(lines) < 2 or not lines[0].startswith("# fps="):
        raise PoseFormatError(f"{path}: first line must be '# fps=<int>'")
    try:
        fps = int(lines[0][len("# fps=") :].strip())
    except ValueError as exc:
        raise PoseFormatError(f"{path}: bad fps header {lines[0]!r}") from exc
    header = lines[1].strip().split(",")
    if header != CSV_HEADER.split(","):
        raise PoseFormatError(f"{path}: header must be {CSV_HEADER!r}, got {lines[1]!r}")

    rows = []
    ncol = len(header)
    for r, line in enumerate(lines[2:], start=1):
        if not line.strip():
            continue
        cells = line.split(",")
        if len(cells) != ncol:
            raise PoseFormatError(f"{path}: row {r} has {len(cells)} columns, expected {ncol}")
        try:
            vals = [float(c) for c in cells[1:]]
        except ValueError as exc:
            raise PoseFormatError(f"{path}: row {r} has a non-numeric cell") from exc
        if not all(math.isfinite(v) for v in vals):
            raise PoseFormatError(f"{path}: row {r} has a non-finite value")
        rows.append(vals)
    if len(rows) < 2:
        raise PoseFormatError(f"{path}: need at least 2 frames, found {len(rows)}")
    return PoseSequence(np.array(rows, dtype=np.float64), fps=fps)


def _tensor_paths(path: str | Path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".f32", ".json"):
        p = p.with_suffix("")
    return p.with_name(p.name + ".f32"), p.with_name(p.name + ".json")


def save_tensor(array: np.ndarray, path: str | Path) -> Path:
    """Write ``<name>.f32`` (little-endian, row-major) plus its ``<name>.json`` sidecar."""
    data_path, meta_path = _tensor_paths(path)
    arr = np.array(array, dtype="<f4", order="C")
    data_path.parent.mkdir(parents=True, exist_ok=True)
    data_path.write_bytes(arr.tobytes(order="C"))
    meta_path.write_text(json.dumps({"dtype": "f32", "shape": list(arr.shape)}), encoding="ascii")
    return data_path


def load_tensor(path: str | Path) -> np.ndarray:
    data_path, meta_path = _tensor_paths(path)
    if not meta_path.is_file():
        raise FileNotFoundError(f"missing tensor sidecar {meta_path}")
    if not data_path.is_file():
        raise FileNotFoundError(f"missing tensor payload {data_path}")
    meta = json.loads(meta_path.read_text(encoding="ascii"))
    if meta.get("dtype") != "f32":
        raise ValueError(f"{meta_path}: unsupported dtype {meta.get('dtype')!r}")
    shape = tuple(int(s) for s in meta["shape"])
    payload = data_path.read_bytes()
    expected = 4 * math.prod(shape)
    if len(payload) != expected:
        raise ValueError(
            f"{data_path}: size mismatch, shape {list(shape)} needs {expected} bytes, found {len(payload)}"
        )
    arr = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
    if not np.isfinite(arr).all():
        raise ValueError(f"{data_path}: tensor contains non-finite values")
    return arr


@dataclass
class Record:
    pose: PoseSequence
    condition: ConditionBundle
    label: str
    name: str = ""


def write_manifest(records: list[dict], path: str | Path) -> None:
    Path(path).write_text(json.dumps(records, indent=2, sort_keys=True) + "\n", encoding="ascii")


def read_manifest(path: str | Path) -> list[dict]:
    """Manifest entries with paths resolved against the manifest's directory."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"dataset manifest not found: {path}")
    entries = json.loads(path.read_text(encoding="ascii"))
    if not isinstance(entries, list):
        raise ValueError(f"{path}: manifest must be a JSON list")
    out = []
    for i, e in enumerate(entries):
        missing = {"pose", "text", "audio", "label"} - set(e)
        if missing:
            raise ValueError(f"{path}: record {i} lacks {sorted(missing)}")
        out.append({k: (str(path.parent / e[k]) if k in ("pose", "text", "audio") else e[k]) for k in e})
    return out


def load_dataset(manifest_path: str | Path) -> list[Record]:
    records = []
    for e in read_manifest(manifest_path):
        cond = ConditionBundle(load_tensor(e["text"]).reshape(-1), load_tensor(e["audio"]))
        records.append(Record(load_pose_sequence(e["pose"]), cond, e["label"], Path(e["pose"]).stem))
    return records
