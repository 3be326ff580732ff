"""Named parameter store and the binary checkpoint format."""
from __future__ import annotations

import json
import struct

import numpy as np

from .autodiff import Tensor

CHECKPOINT_MAGIC = b"PMCKPT01"

_DTYPES = {"f4": np.float32, "f8": np.float64}


class ParamStore:
    """Map from dotted parameter name to tensor, with per-parameter trainable flags.

    Frozen parameters never receive optimizer updates; `set_trainable` with
    namespace prefixes is how training stages freeze submodels.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._trainable: dict[str, bool] = {}

    def add(self, name: str, array, trainable: bool = True) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name: {name}")
        t = Tensor(np.ascontiguousarray(array))
        t.requires_grad = trainable
        self._params[name] = t
        self._trainable[name] = trainable
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def is_trainable(self, name: str) -> bool:
        return self._trainable[name]

    def trainable_items(self):
        return [(n, t) for n, t in self._params.items() if self._trainable[n]]

    def set_trainable(self, prefixes) -> None:
        """Mark parameters under any of the given dotted prefixes trainable, all others frozen."""
        prefixes = tuple(prefixes)
        for name, t in self._params.items():
            on = name.startswith(prefixes)
            self._trainable[name] = on
            t.requires_grad = on

    def zero_grads(self) -> None:
        for t in self._params.values():
            t.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        for name, arr in state.items():
            if name in self._params:
                t = self._params[name]
                if t.data.shape != arr.shape:
                    raise ValueError(f"shape mismatch for {name}: {t.data.shape} vs {arr.shape}")
                t.data = np.ascontiguousarray(arr, dtype=t.data.dtype)
            elif strict:
                raise KeyError(f"unknown parameter in state dict: {name}")


def save_checkpoint(path, arrays: dict[str, np.ndarray]) -> None:
    """Write tensors: magic, u64-LE header length, JSON header, raw LE data in header order."""
    names = sorted(arrays)
    header = {}
    offset = 0
    blobs = []
    for name in names:
        a = np.ascontiguousarray(arrays[name])
        code = {np.dtype(np.float32): "f4", np.dtype(np.float64): "f8"}[a.dtype]
        blob = a.astype(a.dtype.newbyteorder("<")).tobytes()
        header[name] = {"dtype": code, "shape": list(a.shape), "offset": offset}
        offset += len(blob)
        blobs.append(blob)
    hbytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(hbytes)))
        f.write(hbytes)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"bad checkpoint magic: {magic!r}")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode())
        data = f.read()
    out = {}
    for name, meta in header.items():
        dt = np.dtype(_DTYPES[meta["dtype"]]).newbyteorder("<")
        shape = tuple(meta["shape"])
        n = int(np.prod(shape)) if shape else 1
        start = meta["offset"]
        arr = np.frombuffer(data, dtype=dt, count=n, offset=start)
        out[name] = np.ascontiguousarray(arr.reshape(shape).astype(dt.newbyteorder("=")))
    return out
