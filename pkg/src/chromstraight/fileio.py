"""On-disk formats: 8-bit PNG images, GTFL flow files and JSON-lines manifests."""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DatasetError

FLOW_MAGIC = b"GTFL"
_FLOW_HEADER = struct.Struct("<4sII")


def write_png(path, image: np.ndarray) -> None:
    """Write an intensity image in [0, 1] as 8-bit grayscale."""
    data = np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(data, mode="L").save(path, format="PNG")
    except OSError as exc:
        raise DatasetError(f"cannot write image {path}: {exc}") from exc


def read_png(path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            data = np.asarray(img.convert("L"), dtype=np.float64)
    except OSError as exc:
        raise DatasetError(f"cannot read image {path}: {exc}") from exc
    return data / 255.0


def write_flow(path, flow: np.ndarray) -> None:
    """Write an (H, W, 2) pixel flow as little-endian float32 behind a GTFL header."""
    flow = np.asarray(flow)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ValueError(f"flow must have shape (H, W, 2), got {flow.shape}")
    h, w, _ = flow.shape
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            fh.write(_FLOW_HEADER.pack(FLOW_MAGIC, h, w))
            fh.write(flow.astype("<f4").tobytes(order="C"))
    except OSError as exc:
        raise DatasetError(f"cannot write flow {path}: {exc}") from exc


def read_flow(path) -> np.ndarray:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DatasetError(f"cannot read flow {path}: {exc}") from exc
    if len(raw) < _FLOW_HEADER.size:
        raise DatasetError(f"{path}: truncated flow header")
    magic, h, w = _FLOW_HEADER.unpack_from(raw)
    if magic != FLOW_MAGIC:
        raise DatasetError(f"{path}: bad magic {magic!r}")
    body = raw[_FLOW_HEADER.size:]
    if len(body) != h * w * 2 * 4:
        raise DatasetError(f"{path}: expected {h * w * 2 * 4} payload bytes, got {len(body)}")
    return np.frombuffer(body, dtype="<f4").reshape(h, w, 2).astype(np.float32)


def write_jsonl(path, records) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            for rec in records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    except OSError as exc:
        raise DatasetError(f"cannot write {path}: {exc}") from exc


def read_jsonl(path) -> list[dict]:
    try:
        with open(path, encoding="utf-8") as fh:
            return [json.loads(line) for line in fh if line.strip()]
    except OSError as exc:
        raise DatasetError(f"cannot read {path}: {exc}") from exc


def list_images(directory) -> dict[str, Path]:
    """Map image id (file stem) to path for every PNG in ``directory``."""
    directory = Path(directory)
    if not directory.is_dir():
        raise DatasetError(f"not a directory: {directory}")
    return {p.stem: p for p in sorted(directory.glob("*.png"))}


def read_labels(directory) -> dict[str, int] | None:
    path = Path(directory) / "labels.json"
    if not path.exists():
        return None
    with open(path, encoding="utf-8") as fh:
        return {str(k): int(v) for k, v in json.load(fh).items()}


def write_labels(directory, labels: dict[str, int]) -> None:
    path = Path(directory) / "labels.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(dict(sorted(labels.items())), fh, indent=1, sort_keys=True)
        fh.write("\n")
