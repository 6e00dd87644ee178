"""Binary checkpoint format for named tensors and optimizer state.

Layout: magic "CLMW", u32 version, u32 tensor count, then per tensor a u32
name length, UTF-8 name, u32 rank, u64 dims, and little-endian f32 data.
Optimizer state is stored alongside the parameter file with suffix ".opt".
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .optim import AdamWState
from .tensor import Tensor

MAGIC = b"CLMW"
VERSION = 1


def save_tensors(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(tensors)))
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(arr, dtype="<f4")
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)) + nb)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def load_tensors(path: str | Path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"bad checkpoint magic in {path}")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off : off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<I", data, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}Q", data, off)
        off += 8 * rank
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=off).copy().reshape(dims)
        off += 4 * n
        out[name] = arr
    return out


def save_params(path: str | Path, params: dict[str, Tensor]) -> None:
    save_tensors(path, {name: p.data for name, p in params.items()})


def load_params_into(path: str | Path, params: dict[str, Tensor]) -> None:
    stored = load_tensors(path)
    missing = set(params) - set(stored)
    extra = set(stored) - set(params)
    if missing or extra:
        raise ValueError(f"checkpoint/model mismatch: missing={sorted(missing)} extra={sorted(extra)}")
    for name, p in params.items():
        arr = stored[name].astype(p.data.dtype)
        if arr.shape != p.data.shape:
            raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.data.shape}")
        p.data = arr


def optimizer_path(path: str | Path) -> Path:
    p = Path(path)
    return p.with_name(p.name + ".opt")


def save_optimizer(path: str | Path, state: AdamWState) -> None:
    tensors: dict[str, np.ndarray] = {"__step__": np.asarray([state.step], dtype=np.float32)}
    for name, arr in state.m.items():
        tensors["m/" + name] = arr
    for name, arr in state.v.items():
        tensors["v/" + name] = arr
    save_tensors(optimizer_path(path), tensors)


def load_optimizer(path: str | Path, state: AdamWState) -> None:
    """Restore moment buffers and step counter; hyperparameters stay as configured."""
    stored = load_tensors(optimizer_path(path))
    state.step = int(stored.pop("__step__")[0])
    for key, arr in stored.items():
        kind, name = key.split("/", 1)
        target = state.m if kind == "m" else state.v
        if name not in target:
            raise ValueError(f"optimizer state for unknown parameter {name!r}")
        target[name] = arr.astype(target[name].dtype)
