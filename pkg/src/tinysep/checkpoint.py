"""Versioned binary checkpoint container.

Layout: magic, format version, length-prefixed JSON header (model config,
training step, tensor table, free-form extra), then raw little-endian
tensor bytes in table order. Round-trips bit-exactly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .model import ModelConfig

MAGIC = b"MSEP"
FORMAT_VERSION = 1

_DTYPES = {"float32": np.float32, "float64": np.float64}


@dataclass
class Checkpoint:
    config: ModelConfig
    tensors: dict[str, np.ndarray]
    step: int
    extra: dict

    def state_dict(self, prefix: str = "") -> dict[str, torch.Tensor]:
        """Tensors under ``prefix`` as torch tensors, prefix stripped."""
        return {
            k[len(prefix) :]: torch.from_numpy(v.copy())
            for k, v in self.tensors.items()
            if k.startswith(prefix)
        }


def save_checkpoint(
    path: str | Path,
    config: ModelConfig,
    tensors: dict[str, torch.Tensor | np.ndarray],
    step: int = 0,
    extra: dict | None = None,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays: dict[str, np.ndarray] = {}
    for name in sorted(tensors):
        t = tensors[name]
        a = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
        if a.dtype.name not in _DTYPES:
            raise ValueError(f"unsupported tensor dtype {a.dtype} for {name!r}")
        arrays[name] = np.ascontiguousarray(a)
    header = {
        "config": asdict(config),
        "step": int(step),
        "extra": extra or {},
        "tensors": [
            {"name": n, "shape": list(a.shape), "dtype": a.dtype.name}
            for n, a in arrays.items()
        ],
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for a in arrays.values():
            fh.write(a.astype(a.dtype.newbyteorder("<"), copy=False).tobytes())
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise ValueError(f"{path} is not a checkpoint file (bad magic)")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != FORMAT_VERSION:
            raise ValueError(
                f"checkpoint format version {version} unsupported "
                f"(expected {FORMAT_VERSION})"
            )
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        tensors = {}
        for entry in header["tensors"]:
            dtype = np.dtype(_DTYPES[entry["dtype"]]).newbyteorder("<")
            count = int(np.prod(entry["shape"])) if entry["shape"] else 1
            buf = fh.read(count * dtype.itemsize)
            arr = np.frombuffer(buf, dtype=dtype, count=count)
            tensors[entry["name"]] = (
                arr.astype(entry["dtype"]).reshape(entry["shape"])
            )
    return Checkpoint(
        config=ModelConfig(**header["config"]),
        tensors=tensors,
        step=int(header["step"]),
        extra=header["extra"],
    )
