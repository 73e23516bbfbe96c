"""Frame sequences and raw tensor files."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch
from PIL import Image

__all__ = ["write_frames", "read_frames", "write_raw", "read_raw", "write_heatmap", "dump_json"]

FRAME_PATTERN = "frame_{:04d}.png"


def _to_uint8(frame: np.ndarray) -> np.ndarray:
    return (np.clip(frame, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_frames(video, directory) -> list:
    """Write a ``(F, 3, H, W)`` video in [0, 1] as 8-bit RGB PNGs."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    v = video.detach().cpu().numpy() if isinstance(video, torch.Tensor) else np.asarray(video)
    paths = []
    for i, frame in enumerate(v):
        p = directory / FRAME_PATTERN.format(i)
        Image.fromarray(_to_uint8(frame.transpose(1, 2, 0)), mode="RGB").save(p, optimize=False)
        paths.append(p)
    return paths


def read_frames(directory) -> torch.Tensor:
    directory = Path(directory)
    files = sorted(directory.glob("frame_*.png"))
    if not files:
        raise FileNotFoundError(f"no frame_*.png files in {directory}")
    frames = [np.asarray(Image.open(f).convert("RGB"), dtype=np.float32) / 255.0 for f in files]
    return torch.from_numpy(np.stack(frames).transpose(0, 3, 1, 2).copy())


def write_raw(tensor, path) -> None:
    """Little-endian float32 buffer plus ``<path>.json`` sidecar."""
    arr = tensor.detach().cpu().numpy() if isinstance(tensor, torch.Tensor) else np.asarray(tensor)
    arr = np.ascontiguousarray(arr, dtype="<f4")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(arr.tobytes(order="C"))
    sidecar = {"shape": list(arr.shape), "dtype": "float32", "byteorder": "little",
               "layout": "row-major"}
    Path(str(path) + ".json").write_text(json.dumps(sidecar))


def read_raw(path) -> torch.Tensor:
    path = Path(path)
    meta = json.loads(Path(str(path) + ".json").read_text())
    if meta.get("dtype") != "float32" or meta.get("layout", "row-major") != "row-major":
        raise ValueError(f"unsupported raw buffer {meta}")
    arr = np.frombuffer(path.read_bytes(), dtype="<f4").reshape(meta["shape"])
    return torch.from_numpy(arr.astype(np.float32))


def write_heatmap(amap, path, size: int | None = None) -> None:
    """Grayscale PNG of a 2-d map scaled by its own maximum."""
    a = amap.detach().cpu().numpy() if isinstance(amap, torch.Tensor) else np.asarray(amap)
    a = a.astype(np.float64)
    peak = a.max()
    img = Image.fromarray(_to_uint8(a / peak if peak > 0 else a), mode="L")
    if size is not None:
        img = img.resize((size, size), Image.NEAREST)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    img.save(path, optimize=False)


def dump_json(obj, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True))
