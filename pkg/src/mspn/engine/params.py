"""Named parameter collections and their binary checkpoint format.

File layout (all integers little-endian uint32)::

    b"SDRK1" | count | { name_len | name (utf-8) | rank | dims... | float32 data }*
"""
from __future__ import annotations

import os
import struct
import tempfile
from collections.abc import Iterator, Mapping
from pathlib import Path

import numpy as np

from ..errors import ConfigError, DataError
from .tensor import Tensor, grad

MAGIC = b"SDRK1"


class ParamSet(Mapping):
    """Ordered name -> Tensor map; iteration order is insertion order."""

    def __init__(self, items: Mapping[str, np.ndarray | Tensor] | None = None):
        self._params: dict[str, Tensor] = {}
        for name, value in (items or {}).items():
            self.add(name, value)

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise ConfigError(f"duplicate parameter name '{name}'")
        data = value.data if isinstance(value, Tensor) else np.asarray(value)
        t = Tensor(np.array(data, copy=True), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def set_data(self, name: str, data: np.ndarray) -> None:
        t = self._params[name]
        if data.shape != t.shape:
            raise ConfigError(f"shape of '{name}' is fixed at {t.shape}, got {data.shape}")
        t.data = np.asarray(data, dtype=t.dtype)

    def subset(self, prefix: str) -> "ParamSet":
        """Parameters under ``prefix.`` sharing the same Tensor objects."""
        out = ParamSet()
        for name, t in self._params.items():
            if name.startswith(prefix + "."):
                out._params[name] = t
        return out

    def merged(self, *others: "ParamSet") -> "ParamSet":
        out = ParamSet()
        for ps in (self,) + others:
            for name, t in ps._params.items():
                if name in out._params:
                    raise ConfigError(f"duplicate parameter name '{name}'")
                out._params[name] = t
        return out

    def astype(self, dtype) -> "ParamSet":
        return ParamSet({n: t.data.astype(dtype) for n, t in self._params.items()})

    def copy(self) -> "ParamSet":
        return ParamSet({n: t.data for n, t in self._params.items()})

    def numpy(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self._params.items()}

    def equal(self, other: "ParamSet") -> bool:
        if list(self) != list(other):
            return False
        return all(np.array_equal(self[n].data, other[n].data) for n in self)

    # serialization -----------------------------------------------------------

    def to_bytes(self) -> bytes:
        parts = [MAGIC, struct.pack("<I", len(self._params))]
        for name, t in self._params.items():
            raw = name.encode("utf-8")
            parts.append(struct.pack("<I", len(raw)))
            parts.append(raw)
            parts.append(struct.pack("<I", t.ndim))
            parts.append(struct.pack(f"<{t.ndim}I", *t.shape))
            parts.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "ParamSet":
        if buf[: len(MAGIC)] != MAGIC:
            raise DataError("not a parameter file: bad magic")
        pos = len(MAGIC)

        def read(fmt: str):
            nonlocal pos
            size = struct.calcsize(fmt)
            if pos + size > len(buf):
                raise DataError(f"truncated parameter file at byte {pos}")
            vals = struct.unpack_from(fmt, buf, pos)
            pos += size
            return vals

        (count,) = read("<I")
        out = cls()
        for _ in range(count):
            (n,) = read("<I")
            if pos + n > len(buf):
                raise DataError(f"truncated parameter name at byte {pos}")
            name = buf[pos : pos + n].decode("utf-8")
            pos += n
            (rank,) = read("<I")
            dims = read(f"<{rank}I") if rank else ()
            size = int(np.prod(dims, dtype=np.int64))
            if pos + 4 * size > len(buf):
                raise DataError(f"truncated data for '{name}' at byte {pos}")
            data = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).reshape(dims)
            pos += 4 * size
            out.add(name, data.astype(np.float32))
        if pos != len(buf):
            raise DataError(f"{len(buf) - pos} trailing bytes after parameter data")
        return out

    def save(self, path: str | os.PathLike) -> None:
        atomic_write_bytes(path, self.to_bytes())

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ParamSet":
        try:
            payload = Path(path).read_bytes()
        except OSError as exc:
            raise DataError(f"cannot read parameters from {path}: {exc.strerror}") from exc
        return cls.from_bytes(payload)


def atomic_write_bytes(path: str | os.PathLike, payload: bytes) -> None:
    """Write via a temp file in the same directory, then rename."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def backward(loss: Tensor, params: ParamSet) -> dict[str, np.ndarray]:
    """Gradient of a scalar loss for every parameter (zeros if unused)."""
    names = list(params)
    grads = grad(loss, [params[n] for n in names])
    return dict(zip(names, grads))
