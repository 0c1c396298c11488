"""Dense tensor container with a reverse-mode differentiation tape.

Values are stored row-major in numpy arrays. Every primitive records its
operands and a vector-Jacobian closure on the output node; ``backward``
replays the recorded graph in reverse topological order and accumulates
gradients additively into the leaves.

Two global engine settings exist:

* precision: float64 (verification / gradient checks) or float32 (training);
* finiteness checking: every primitive output is screened for NaN/Inf and
  a ``NonFiniteError`` is raised as soon as one appears.
"""

from __future__ import annotations

import struct
from contextlib import contextmanager
from typing import Callable, Dict, Iterable, Optional, Sequence, Tuple

import numpy as np

__all__ = [
    "Tensor",
    "EngineError",
    "ShapeError",
    "NonFiniteError",
    "TapeError",
    "set_dtype",
    "get_dtype",
    "precision",
    "set_finite_checks",
    "finite_checks_enabled",
    "backward",
    "gradients",
    "save_array",
    "load_array",
    "save_array_bytes",
    "load_array_bytes",
]


class EngineError(Exception):
    """Base class for engine failures."""


class ShapeError(EngineError, ValueError):
    """Operands have incompatible extents."""


class NonFiniteError(EngineError, FloatingPointError):
    """A primitive produced NaN or Inf."""


class TapeError(EngineError, RuntimeError):
    """Tape misuse, e.g. backward called twice on the same graph."""


_DTYPE = np.float64
_CHECK_FINITE = True


def set_dtype(dtype) -> None:
    """Switch the global scalar precision (float32 or float64)."""
    global _DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise EngineError(f"unsupported dtype {dtype!r}; use float32 or float64")
    _DTYPE = dt.type


def get_dtype():
    return _DTYPE


@contextmanager
def precision(dtype):
    """Temporarily switch the engine precision."""
    prev = get_dtype()
    set_dtype(dtype)
    try:
        yield
    finally:
        set_dtype(prev)


def set_finite_checks(enabled: bool) -> None:
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


def finite_checks_enabled() -> bool:
    return _CHECK_FINITE


def check_finite(data: np.ndarray, where: str = "") -> None:
    if _CHECK_FINITE and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite value produced{' in ' + where if where else ''}")


class Tensor:
    """N-dimensional real-valued grid, optionally tracked on the tape."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_done")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=_DTYPE)
        check_finite(arr, "tensor creation")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: Tuple["Tensor", ...] = ()
        self._vjp: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self._done = False

    @classmethod
    def _node(cls, data: np.ndarray, parents: Tuple["Tensor", ...], vjp) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = any(p.requires_grad for p in parents)
        out.grad = None
        out._done = False
        if out.requires_grad:
            out._parents = parents
            out._vjp = vjp
        else:
            out._parents = ()
            out._vjp = None
        return out

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def is_leaf(self) -> bool:
        return self._vjp is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar (implemented in ops.py, bound late) -------------
    def __add__(self, other):
        from . import ops

        return ops.add(self, _as_tensor(other, self)) if not isinstance(other, (int, float)) else ops.add_scalar(self, float(other))

    def __sub__(self, other):
        from . import ops

        if isinstance(other, (int, float)):
            return ops.add_scalar(self, -float(other))
        return ops.sub(self, _as_tensor(other, self))

    def __mul__(self, other):
        from . import ops

        if isinstance(other, (int, float)):
            return ops.scale(self, float(other))
        return ops.mul(self, _as_tensor(other, self))

    __rmul__ = __mul__
    __radd__ = __add__

    def __neg__(self):
        from . import ops

        return ops.scale(self, -1.0)

    def reshape(self, *shape):
        from . import ops

        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, axes):
        from . import ops

        return ops.transpose(self, axes)

    def sum(self):
        from . import ops

        return ops.total_sum(self)

    def mean(self):
        from . import ops

        return ops.total_mean(self)

    def backward(self) -> None:
        backward(self)


def _raise_not_scalar(t: Tensor):
    raise ShapeError(f"expected a scalar tensor, got shape {t.shape}")


def _as_tensor(value, like: Tensor) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(np.asarray(value, dtype=like.data.dtype))


def _topo_order(root: Tensor) -> list:
    """Iterative DFS post-order; deterministic for a fixed graph."""
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Reverse sweep from a scalar loss; accumulates ``grad`` on leaves."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise TapeError("loss does not depend on any tracked tensor")
    if loss._done:
        raise TapeError("backward already ran for this graph; rebuild the forward pass first")

    order = _topo_order(loss)
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            continue
        parent_grads = node._vjp(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
        node._done = True
    loss._done = True


def gradients(loss: Tensor, leaves: Iterable[Tensor]) -> Dict[int, np.ndarray]:
    """Run backward and return a map id(leaf) -> gradient.

    Leaves not reached by the sweep get zeros of their own shape.
    """
    leaves = list(leaves)
    for leaf in leaves:
        leaf.zero_grad()
    backward(loss)
    out: Dict[int, np.ndarray] = {}
    for leaf in leaves:
        out[id(leaf)] = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
    return out


# ----------------------------------------------------------------------
# Binary serialization: magic "DTNS", u32 rank, u64 extents, f32 payload
# row-major, all little-endian.
# ----------------------------------------------------------------------

_MAGIC = b"DTNS"


def save_array_bytes(arr: np.ndarray) -> bytes:
    a = np.ascontiguousarray(arr, dtype=np.float32)
    head = _MAGIC + struct.pack("<I", a.ndim)
    head += struct.pack(f"<{a.ndim}Q", *a.shape) if a.ndim else b""
    return head + a.astype("<f4").tobytes()


def load_array_bytes(blob: bytes) -> np.ndarray:
    if blob[:4] != _MAGIC:
        raise EngineError("bad tensor file: missing DTNS magic")
    (rank,) = struct.unpack_from("<I", blob, 4)
    shape = struct.unpack_from(f"<{rank}Q", blob, 8) if rank else ()
    offset = 8 + 8 * rank
    count = int(np.prod(shape)) if rank else 1
    payload = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
    return payload.reshape(shape).astype(_DTYPE)


def save_array(path, arr: np.ndarray) -> None:
    from .fileio import atomic_write_bytes

    atomic_write_bytes(path, save_array_bytes(arr))


def load_array(path) -> np.ndarray:
    with open(path, "rb") as f:
        return load_array_bytes(f.read())
