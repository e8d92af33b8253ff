"""Token containers, seeded randomness, flattening order and on-disk formats.

Grids are stored as ``(T, h, w, d)`` float arrays. Flattening is temporal-major:
index ``k = (t * h + y) * w + x``, channels last.
"""
from __future__ import annotations

import contextvars
import csv
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MAGIC = b"BMBT"
FORMAT_VERSION = 1
DTYPE_CODES = {1: np.dtype("<f8"), 2: np.dtype("<f4")}
_CODE_OF = {np.dtype("float64"): 1, np.dtype("float32"): 2}


class ShapeError(ValueError):
    """Array shapes or counts disagree with a declared contract."""


class TensorFormatError(ValueError):
    """A tensor file could not be decoded."""


class BadMagicError(TensorFormatError):
    pass


class DtypeError(TensorFormatError):
    pass


class TruncatedError(TensorFormatError):
    pass


class CapacityError(MemoryError):
    """A kernel would exceed its configured scratch-buffer budget."""

    def __init__(self, requested: int, budget: int | None):
        self.requested = requested
        self.budget = budget
        super().__init__(f"scratch buffer of {requested} bytes exceeds budget {budget}")


# --------------------------------------------------------------------------
# grids


@dataclass(frozen=True, eq=False)
class TokenGrid:
    """Immutable ``(T, h, w, d)`` block of real-valued tokens."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data)
        if arr.ndim != 4:
            raise ShapeError(f"grid must be rank 4 (T, h, w, d), got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise ShapeError(f"grid dims must be positive, got {arr.shape}")
        if arr.dtype not in (np.float64, np.float32):
            arr = arr.astype(np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError("grid contains non-finite values")
        if arr is self.data:
            arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def T(self) -> int:
        return self.data.shape[0]

    @property
    def h(self) -> int:
        return self.data.shape[1]

    @property
    def w(self) -> int:
        return self.data.shape[2]

    @property
    def d(self) -> int:
        return self.data.shape[3]

    @property
    def num_tokens(self) -> int:
        return self.T * self.h * self.w

    def __eq__(self, other):
        if not isinstance(other, TokenGrid):
            return NotImplemented
        return (self.data.shape == other.data.shape
                and self.data.dtype == other.data.dtype
                and bool(np.array_equal(self.data, other.data)))

    __hash__ = None  # type: ignore[assignment]


class QueryGrid(TokenGrid):
    """Compressed query tokens; same layout as :class:`TokenGrid`."""


def flatten(grid: TokenGrid) -> np.ndarray:
    """Return the ``(L, d)`` token sequence in (t, y, x) lexicographic order."""
    return grid.data.reshape(grid.num_tokens, grid.d)


def unflatten(seq: np.ndarray, T: int, h: int, w: int, cls=TokenGrid) -> TokenGrid:
    seq = np.asarray(seq)
    if seq.ndim != 2 or seq.shape[0] != T * h * w:
        raise ShapeError(f"cannot unflatten {seq.shape} into ({T}, {h}, {w}, d)")
    return cls(seq.reshape(T, h, w, seq.shape[1]))


def seq_index(t: int, y: int, x: int, h: int, w: int) -> int:
    return (t * h + y) * w + x


# --------------------------------------------------------------------------
# randomness


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 generator; streams are identical across platforms for a given seed."""
    if seed < 0 or seed >= 2**64:
        raise ValueError("seed must be an unsigned 64-bit integer")
    return np.random.Generator(np.random.PCG64(seed))


def random_grid(rng: np.random.Generator, T: int, h: int, w: int, d: int,
                scale: float = 1.0, dtype=np.float64) -> TokenGrid:
    return TokenGrid((scale * rng.standard_normal((T, h, w, d))).astype(dtype, copy=False))


# --------------------------------------------------------------------------
# scratch-buffer accounting

_meter: contextvars.ContextVar["BufferMeter | None"] = contextvars.ContextVar(
    "bimba_buffer_meter", default=None)


class BufferMeter:
    """Records the largest scratch allocation declared by kernels in scope.

    Kernels call :func:`declare_buffer` before allocating; when a budget is set
    an oversize declaration raises :class:`CapacityError` before any memory is
    touched.
    """

    def __init__(self, budget: int | None = None):
        self.budget = budget
        self.peak = 0
        self.count = 0
        self._token = None

    def declare(self, nbytes: int) -> None:
        nbytes = int(nbytes)
        if self.budget is not None and nbytes > self.budget:
            raise CapacityError(nbytes, self.budget)
        self.count += 1
        self.peak = max(self.peak, nbytes)

    def __enter__(self) -> "BufferMeter":
        self._token = _meter.set(self)
        return self

    def __exit__(self, *exc):
        _meter.reset(self._token)
        return False


def declare_buffer(shape: Sequence[int] | int, dtype) -> int:
    """Declare a scratch allocation to the active meter; returns its byte size."""
    n = int(np.prod(shape)) if not isinstance(shape, int) else shape
    nbytes = n * np.dtype(dtype).itemsize
    meter = _meter.get()
    if meter is not None:
        meter.declare(nbytes)
    return nbytes


# --------------------------------------------------------------------------
# tensor files


def write_tensor(grid: TokenGrid | np.ndarray, path: str | Path) -> None:
    arr = grid.data if isinstance(grid, TokenGrid) else np.ascontiguousarray(grid)
    code = _CODE_OF.get(arr.dtype)
    if code is None:
        raise DtypeError(f"unsupported dtype {arr.dtype}")
    if arr.ndim > 255:
        raise ShapeError("rank exceeds 255")
    header = MAGIC + struct.pack("<BBB", FORMAT_VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    payload = arr.astype(DTYPE_CODES[code], copy=False).tobytes(order="C")
    Path(path).write_bytes(header + payload)


def read_array(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 7:
        raise TruncatedError(f"{path}: header truncated ({len(raw)} bytes)")
    if raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {raw[:4]!r}")
    version, code, rank = struct.unpack_from("<BBB", raw, 4)
    if version != FORMAT_VERSION:
        raise TensorFormatError(f"{path}: unsupported version {version}")
    if code not in DTYPE_CODES:
        raise DtypeError(f"{path}: unknown dtype code {code}")
    off = 7 + 8 * rank
    if len(raw) < off:
        raise TruncatedError(f"{path}: dims truncated")
    dims = struct.unpack_from(f"<{rank}Q", raw, 7)
    dtype = DTYPE_CODES[code]
    need = int(np.prod(dims, dtype=np.uint64)) * dtype.itemsize
    have = len(raw) - off
    if have < need:
        raise TruncatedError(f"{path}: payload has {have} bytes, expected {need}")
    if have > need:
        raise TensorFormatError(f"{path}: {have - need} trailing bytes after payload")
    arr = np.frombuffer(raw, dtype=dtype, count=need // dtype.itemsize, offset=off)
    return arr.reshape(dims).astype(dtype.newbyteorder("="))


def read_tensor(path: str | Path, expect_dtype=None) -> TokenGrid:
    arr = read_array(path)
    if expect_dtype is not None and arr.dtype != np.dtype(expect_dtype):
        raise DtypeError(f"{path}: dtype {arr.dtype}, expected {np.dtype(expect_dtype)}")
    if arr.ndim != 4:
        raise ShapeError(f"{path}: expected rank-4 grid, got rank {arr.ndim}")
    return TokenGrid(arr)


# --------------------------------------------------------------------------
# csv


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\r\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def read_csv(path: str | Path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: missing header row")
    return rows[0], rows[1:]


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    if v is None:
        return ""
    return str(v)
