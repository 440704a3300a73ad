"""MemNet data types and single-step forward semantics.

A MemNet step projects the input and previous hidden state into a query,
key and value, reads the FIFO event memory with an unnormalized Gaussian
kernel, updates the hidden state, emits an output and finally pushes the
new (key, value) event.  Every map is linear and bias-free; the only
nonlinearity is the kernel inside the read.
"""

from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "DimensionError",
    "Dims",
    "EventMemory",
    "ModelParams",
    "StepState",
    "StepTrace",
    "gaussian_similarity",
    "init_params",
    "load_params",
    "memory_push",
    "param_count",
    "project_qkv",
    "read_memory",
    "save_params",
    "step",
]


class DimensionError(ValueError):
    """Raised when an array does not have the shape dictated by ``Dims``."""


def _check_shape(name: str, arr: np.ndarray, shape: tuple[int, ...]) -> None:
    if arr.shape != shape:
        raise DimensionError(f"{name}: expected shape {shape}, got {arr.shape}")


@dataclass(frozen=True)
class Dims:
    n_x: int
    n_h: int
    n_o: int
    n_mem: int

    def __post_init__(self):
        for name in ("n_x", "n_h", "n_o", "n_mem"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value <= 0:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")


# (field name, rows, cols) in terms of Dims attributes; order fixes serialization.
_PARAM_LAYOUT = (
    ("Wq_x", "n_h", "n_x"),
    ("Wq_h", "n_h", "n_h"),
    ("Wk_x", "n_h", "n_x"),
    ("Wk_h", "n_h", "n_h"),
    ("Wv_x", "n_h", "n_x"),
    ("Wv_h", "n_h", "n_h"),
    ("Wh_r", "n_h", "n_h"),
    ("Wh_x", "n_h", "n_x"),
    ("Wh_h", "n_h", "n_h"),
    ("Wo_r", "n_o", "n_h"),
    ("Wo_h", "n_o", "n_h"),
)


@dataclass
class ModelParams:
    """The eleven weight matrices of the linear controller.

    The same class doubles as the gradient container returned by
    :func:`memnet.training.backward`.
    """

    Wq_x: np.ndarray
    Wq_h: np.ndarray
    Wk_x: np.ndarray
    Wk_h: np.ndarray
    Wv_x: np.ndarray
    Wv_h: np.ndarray
    Wh_r: np.ndarray
    Wh_x: np.ndarray
    Wh_h: np.ndarray
    Wo_r: np.ndarray
    Wo_h: np.ndarray

    @property
    def dims_hint(self) -> tuple[int, int, int]:
        """(n_x, n_h, n_o) read off the matrix shapes."""
        n_h, n_x = self.Wq_x.shape
        return n_x, n_h, self.Wo_r.shape[0]

    def validate(self, dims: Dims) -> None:
        for name, rows, cols in _PARAM_LAYOUT:
            _check_shape(name, getattr(self, name), (getattr(dims, rows), getattr(dims, cols)))

    def as_dict(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}

    def copy(self) -> "ModelParams":
        return type(self)(**{k: v.copy() for k, v in self.as_dict().items()})

    @classmethod
    def zeros(cls, dims: Dims) -> "ModelParams":
        return cls(**{
            name: np.zeros((getattr(dims, rows), getattr(dims, cols)))
            for name, rows, cols in _PARAM_LAYOUT
        })

    def size(self) -> int:
        return sum(a.size for a in self.as_dict().values())


def param_count(dims: Dims) -> int:
    """Number of trainable scalars: 4*n_h*n_x + 5*n_h**2 + 2*n_o*n_h."""
    return 4 * dims.n_h * dims.n_x + 5 * dims.n_h ** 2 + 2 * dims.n_o * dims.n_h


def init_params(dims: Dims, seed: int) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) entries from a seeded generator."""
    rng = np.random.default_rng(seed)
    mats = {}
    for name, rows, cols in _PARAM_LAYOUT:
        shape = (getattr(dims, rows), getattr(dims, cols))
        bound = 1.0 / np.sqrt(shape[1])
        mats[name] = rng.uniform(-bound, bound, size=shape)
    return ModelParams(**mats)


def gaussian_similarity(a, b, sigma: float) -> float:
    """exp(-||a - b||^2 / (2 sigma)); sigma is variance-like."""
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma!r}")
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise DimensionError(f"length mismatch: {a.shape} vs {b.shape}")
    diff = a - b
    return float(np.exp(-np.dot(diff, diff) / (2.0 * sigma)))


@dataclass
class EventMemory:
    """Fixed-capacity FIFO of (key, value) events; slot 0 is the newest.

    ``origins`` records which time step wrote each slot (-1 while the slot
    is still in its zero-initialized state).  Pushes return a new object and
    never mutate arrays in place, so earlier snapshots stay valid.
    """

    keys: np.ndarray
    values: np.ndarray
    write_count: int = 0
    origins: np.ndarray = None

    def __post_init__(self):
        if self.origins is None:
            self.origins = np.full(self.keys.shape[0], -1, dtype=np.int64)

    @classmethod
    def empty(cls, n_mem: int, n_h: int) -> "EventMemory":
        return cls(np.zeros((n_mem, n_h)), np.zeros((n_mem, n_h)))

    @property
    def capacity(self) -> int:
        return self.keys.shape[0]

    @property
    def n_filled(self) -> int:
        return min(self.write_count, self.capacity)


def memory_push(memory: EventMemory, k, v, origin: int = -1) -> EventMemory:
    """Shift every event one slot older, put (k, v) in slot 0, drop the oldest."""
    k = np.asarray(k, dtype=float)
    v = np.asarray(v, dtype=float)
    n_h = memory.keys.shape[1]
    _check_shape("k", k, (n_h,))
    _check_shape("v", v, (n_h,))
    keys = np.empty_like(memory.keys)
    values = np.empty_like(memory.values)
    origins = np.empty_like(memory.origins)
    keys[0], values[0], origins[0] = k, v, origin
    keys[1:] = memory.keys[:-1]
    values[1:] = memory.values[:-1]
    origins[1:] = memory.origins[:-1]
    return EventMemory(keys, values, memory.write_count + 1, origins)


def read_memory(q, memory: EventMemory, sigma: float) -> tuple[np.ndarray, np.ndarray]:
    """Kernel-weighted sum of stored values.

    Returns ``(r, sims)`` with ``sims[i] = G(q, keys[i])`` and
    ``r = sum_i sims[i] * values[i]``.  The weights are not normalized.
    """
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma!r}")
    q = np.asarray(q, dtype=float)
    _check_shape("q", q, (memory.keys.shape[1],))
    diff = q - memory.keys
    sims = np.exp(-np.einsum("ij,ij->i", diff, diff) / (2.0 * sigma))
    return sims @ memory.values, sims


def project_qkv(x, h_prev, params: ModelParams) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=float)
    h_prev = np.asarray(h_prev, dtype=float)
    n_x, n_h, _ = params.dims_hint
    _check_shape("x", x, (n_x,))
    _check_shape("h_prev", h_prev, (n_h,))
    q = params.Wq_x @ x + params.Wq_h @ h_prev
    k = params.Wk_x @ x + params.Wk_h @ h_prev
    v = params.Wv_x @ x + params.Wv_h @ h_prev
    return q, k, v


@dataclass
class StepState:
    h: np.ndarray
    memory: EventMemory
    t: int = 0

    @classmethod
    def initial(cls, dims: Dims) -> "StepState":
        return cls(np.zeros(dims.n_h), EventMemory.empty(dims.n_mem, dims.n_h), 0)


@dataclass
class StepTrace:
    """Everything one step computed, kept for BPTT and for memory dumps."""

    t: int
    x: np.ndarray
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    r: np.ndarray
    h_prev: np.ndarray
    h: np.ndarray
    o: np.ndarray
    sims: np.ndarray
    keys: np.ndarray  # memory snapshot seen by the read (pre-push)
    values: np.ndarray
    origins: np.ndarray
    written: bool = True


def step(state: StepState, x, params: ModelParams, sigma: float,
         write: bool = True) -> tuple[StepState, np.ndarray, StepTrace]:
    """Advance one time step.

    Order matters: the read sees the memory *before* this step's event is
    pushed, and the output uses ``h_prev`` rather than the new ``h``.
    With ``write=False`` the push is skipped (write gating) but ``t`` still
    advances.
    """
    x = np.asarray(x, dtype=float)
    h_prev = state.h
    q, k, v = project_qkv(x, h_prev, params)
    memory = state.memory
    r, sims = read_memory(q, memory, sigma)
    h = params.Wh_r @ r + params.Wh_x @ x + params.Wh_h @ h_prev
    o = params.Wo_r @ r + params.Wo_h @ h_prev
    trace = StepTrace(state.t, x, q, k, v, r, h_prev, h, o, sims,
                      memory.keys, memory.values, memory.origins, bool(write))
    if write:
        memory = memory_push(memory, k, v, origin=state.t)
    return StepState(h, memory, state.t + 1), o, trace


# -- serialization -----------------------------------------------------------

_MAGIC = b"MEMNETPK"
_VERSION = 1
_HEADER = struct.Struct("<8sHH4q")  # magic, version, kind-name length, 4 dims


def save_params(path, params, dims, kind: str = "memnet") -> None:
    """Write a flat binary checkpoint: header, kind tag, row-major float64 data.

    Works for any dataclass of arrays (MemNet and the baseline cells).
    ``dims`` is a :class:`Dims` or a 4-tuple ``(n_x, n_h, n_o, n_mem)``;
    baselines store ``n_mem = 0``.
    """
    if isinstance(dims, Dims):
        dims = (dims.n_x, dims.n_h, dims.n_o, dims.n_mem)
    kind_b = kind.encode("ascii")
    chunks = [_HEADER.pack(_MAGIC, _VERSION, len(kind_b), *dims), kind_b]
    for f in dataclasses.fields(params):
        arr = np.ascontiguousarray(getattr(params, f.name), dtype="<f8")
        chunks.append(struct.pack("<2q", *(arr.shape if arr.ndim == 2 else (arr.shape[0], 0))))
        chunks.append(arr.tobytes(order="C"))
    Path(path).write_bytes(b"".join(chunks))


def load_params(path) -> tuple[str, tuple[int, int, int, int], list[np.ndarray]]:
    """Inverse of :func:`save_params`.

    Returns ``(kind, (n_x, n_h, n_o, n_mem), arrays)`` with arrays in field
    order, so ``ParamsClass(*arrays)`` rebuilds the object.  1-D arrays are
    stored with a zero column count.
    """
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size or not blob.startswith(_MAGIC):
        raise ValueError(f"{path}: not a memnet checkpoint")
    magic, version, klen, n_x, n_h, n_o, n_mem = _HEADER.unpack_from(blob, 0)
    if magic != _MAGIC:
        raise ValueError(f"{path}: not a memnet checkpoint")
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = _HEADER.size
    kind = blob[pos:pos + klen].decode("ascii")
    pos += klen
    arrays = []
    while pos < len(blob):
        if pos + 16 > len(blob):
            raise ValueError(f"{path}: truncated checkpoint")
        rows, cols = struct.unpack_from("<2q", blob, pos)
        pos += 16
        n = rows * (cols or 1)
        if rows < 0 or cols < 0 or pos + 8 * n > len(blob):
            raise ValueError(f"{path}: truncated checkpoint")
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=pos).astype(float)
        pos += 8 * n
        arrays.append(arr.reshape((rows, cols)) if cols else arr)
    return kind, (n_x, n_h, n_o, n_mem), arrays
