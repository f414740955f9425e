"""Named parameter collections and the binary checkpoint format."""

from __future__ import annotations

import struct
from pathlib import Path
from typing import BinaryIO, Callable, Iterator, Mapping

import numpy as np

MAGIC = b"FRIR"
FORMAT_VERSION = 1
_DTYPE_TAGS = {np.dtype(np.float64): 1, np.dtype(np.float32): 2}
_TAG_DTYPES = {tag: dt for dt, tag in _DTYPE_TAGS.items()}


class ManifestError(ValueError):
    """Two parameter sets do not share names and shapes."""


class CheckpointError(ValueError):
    pass


class ParameterSet(Mapping[str, np.ndarray]):
    """An ordered, read-only mapping of parameter name to array.

    Arrays are never mutated in place; operations return new sets.
    """

    __slots__ = ("_arrays",)

    def __init__(self, arrays: Mapping[str, np.ndarray] | None = None):
        self._arrays: dict[str, np.ndarray] = {}
        for name, arr in (arrays or {}).items():
            a = np.asarray(arr)
            if a.dtype.kind != "f":
                raise TypeError(f"parameter {name!r} must be floating point, got {a.dtype}")
            self._arrays[name] = a

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._arrays)

    def __len__(self) -> int:
        return len(self._arrays)

    def __repr__(self) -> str:
        return f"ParameterSet({self.manifest()})"

    def manifest(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(name, tuple(a.shape)) for name, a in self._arrays.items()]

    @property
    def size(self) -> int:
        """Total number of scalars."""
        return int(sum(a.size for a in self._arrays.values()))

    def copy(self) -> ParameterSet:
        return ParameterSet({k: v.copy() for k, v in self._arrays.items()})

    def map(self, fn: Callable[[np.ndarray], np.ndarray]) -> ParameterSet:
        return ParameterSet({k: fn(v) for k, v in self._arrays.items()})

    def zeros_like(self) -> ParameterSet:
        return self.map(np.zeros_like)

    def with_prefix(self, prefix: str) -> ParameterSet:
        return ParameterSet({k: v for k, v in self._arrays.items() if k.startswith(prefix)})

    def merged(self, other: Mapping[str, np.ndarray]) -> ParameterSet:
        out = dict(self._arrays)
        out.update(other)
        return ParameterSet(out)

    def check_manifest(self, other: Mapping[str, np.ndarray], what: str = "parameter sets") -> None:
        mine = self.manifest()
        theirs = [(k, tuple(np.shape(v))) for k, v in other.items()]
        if mine != theirs:
            raise ManifestError(f"{what}: manifest mismatch {mine} vs {theirs}")

    def bit_equal(self, other: ParameterSet) -> bool:
        if self.manifest() != other.manifest():
            return False
        return all(
            self[k].dtype == other[k].dtype and self[k].tobytes() == other[k].tobytes() for k in self
        )


# ---------------------------------------------------------------------------
# checkpoint format: little-endian throughout
#   magic "FRIR" | version u32 | entry count u32
#   per entry: name length u32 | utf-8 name | dtype tag u8 | rank u32 | extents u64 * rank | payload


def write_checkpoint(params: Mapping[str, np.ndarray], fh: BinaryIO) -> None:
    fh.write(MAGIC)
    fh.write(struct.pack("<II", FORMAT_VERSION, len(params)))
    for name, arr in params.items():
        arr = np.asarray(arr)
        if arr.dtype not in _DTYPE_TAGS:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name!r}")
        raw = name.encode("utf-8")
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<BI", _DTYPE_TAGS[arr.dtype], arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())


def read_checkpoint(fh: BinaryIO) -> ParameterSet:
    def take(n: int) -> bytes:
        buf = fh.read(n)
        if len(buf) != n:
            raise CheckpointError("truncated checkpoint")
        return buf

    if take(4) != MAGIC:
        raise CheckpointError("bad checkpoint magic")
    version, count = struct.unpack("<II", take(8))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    arrays = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        tag, rank = struct.unpack("<BI", take(5))
        if tag not in _TAG_DTYPES:
            raise CheckpointError(f"unknown dtype tag {tag} for {name!r}")
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        dtype = _TAG_DTYPES[tag].newbyteorder("<")
        n = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(take(n * dtype.itemsize), dtype=dtype).reshape(shape)
        arrays[name] = arr.astype(_TAG_DTYPES[tag])
    return ParameterSet(arrays)


def to_bytes(params: Mapping[str, np.ndarray]) -> bytes:
    import io

    buf = io.BytesIO()
    write_checkpoint(params, buf)
    return buf.getvalue()


def from_bytes(data: bytes) -> ParameterSet:
    import io

    return read_checkpoint(io.BytesIO(data))


def save(params: Mapping[str, np.ndarray], path: str | Path) -> None:
    with open(path, "wb") as fh:
        write_checkpoint(params, fh)


def load(path: str | Path) -> ParameterSet:
    with open(path, "rb") as fh:
        return read_checkpoint(fh)


def manifest_names(data: bytes) -> list[str]:
    """Parameter names contained in a serialized message, read from its headers."""
    return list(from_bytes(data))
