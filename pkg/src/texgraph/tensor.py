"""Dense float64 tensors with taped reverse-mode differentiation.

Conventions used across the package:

  - every value is a contiguous row-major float64 array; there is no
    other dtype and no implicit broadcasting (the few mixed-shape ops,
    like ``add_channel_bias`` or ``scale_columns``, are explicit),
  - feature maps are rank-3 ``H x W x C`` arrays, matrices rank-2,
    vectors rank-1, scalars rank-0,
  - recorded tensors are immutable once created; only leaf
    ``Parameter`` values may be rewritten between recorded passes,
  - gradients accumulate in reverse creation (tape) order, which makes
    repeated backward passes over the same tape bitwise reproducible.

Operations record onto the innermost active :class:`Tape`.  With no
active tape (or inside :func:`no_grad`) the same functions run as plain
numpy computations.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

__all__ = [
    "Tensor",
    "Parameter",
    "Tape",
    "no_grad",
    "backward",
    "add",
    "sub",
    "mul",
    "scale",
    "add_const",
    "exp",
    "log",
    "sqrt",
    "reciprocal",
    "relu",
    "sigmoid",
    "softmax",
    "matmul",
    "transpose",
    "reshape",
    "concat",
    "reduce",
    "gather_rows",
    "pick",
    "scale_by",
    "scale_columns",
    "pairwise_sq_dist",
    "residual_aggregate",
]

_TAPES: list["Tape"] = []
_GRAD_ENABLED: bool = True


class Tape:
    """Recording of differentiable operations for one forward pass.

    Nodes are appended in creation order, so every node's inputs precede
    it in the sequence.  :func:`backward` walks the sequence in reverse,
    visiting each node exactly once; this fixes the gradient
    accumulation order and makes backward deterministic.
    """

    __slots__ = ("nodes",)

    def __init__(self) -> None:
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> bool:
        popped = _TAPES.pop()
        assert popped is self, "tapes must be exited innermost-first"
        return False


class no_grad:
    """Context manager that disables recording (plain evaluation)."""

    __slots__ = ("_prev",)

    def __enter__(self) -> None:
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False

    def __exit__(self, *exc) -> bool:
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Tensor:
    """A dense float64 n-dimensional value, optionally on a tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_tape", "node_id")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.c_contiguous:  # ascontiguousarray would promote 0-d to 1-d
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._tape: Tape | None = None
        self.node_id = -1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data) if self.requires_grad else None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)


class Parameter(Tensor):
    """A named leaf tensor with a persistent gradient accumulator."""

    __slots__ = ("name", "min_value")

    def __init__(self, name: str, data, min_value: float | None = None):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.min_value = min_value
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def _active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    """Wrap an op result, recording it when a tape is active and needed."""
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
        out._tape = tape
        out.node_id = len(tape.nodes)
        tape.nodes.append(out)
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    """Add a gradient contribution to ``t`` (out-of-place, order-stable)."""
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


def backward(loss: Tensor, seed: float = 1.0) -> None:
    """Reverse sweep over the tape ``loss`` was recorded on.

    ``loss`` must be a scalar (rank-0).  All non-leaf gradients on the
    tape are cleared first, so calling backward twice over the same tape
    yields bitwise-identical results; leaf gradients (parameters)
    accumulate across calls until explicitly zeroed.  ``seed`` scales
    the initial gradient, which is how mini-batch averaging is applied
    without extra graph nodes.
    """
    if loss.ndim != 0:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        return  # constant loss: nothing upstream to differentiate
    for node in tape.nodes:
        node.grad = None
    loss.grad = np.asarray(seed, dtype=np.float64)
    for node in tape.nodes[loss.node_id:: -1]:
        if node.grad is not None and node._backward is not None:
            node._backward(node.grad)


def _check_same_shape(a: Tensor, b: Tensor, opname: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{opname}: operand shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# pointwise arithmetic
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")

    def bw(g):
        _accum(a, g)
        _accum(b, g)

    return _make(a.data + b.data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")

    def bw(g):
        _accum(a, g)
        _accum(b, -g)

    return _make(a.data - b.data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        _accum(a, g * bd)
        _accum(b, g * ad)

    return _make(ad * bd, (a, b), bw)


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a python constant."""
    c = float(c)

    def bw(g):
        _accum(x, g * c)

    return _make(x.data * c, (x,), bw)


def add_const(x: Tensor, c: float) -> Tensor:
    """Shift by a python constant (derivative 1)."""

    def bw(g):
        _accum(x, g)

    return _make(x.data + float(c), (x,), bw)


def exp(x: Tensor) -> Tensor:
    """Elementwise exp.  Overflows to inf for inputs above ~709."""
    out_data = np.exp(x.data)

    def bw(g):
        _accum(x, g * out_data)

    return _make(out_data, (x,), bw)


def log(x: Tensor) -> Tensor:
    """Elementwise natural log; caller guarantees positive input."""
    xd = x.data

    def bw(g):
        _accum(x, g / xd)

    return _make(np.log(xd), (x,), bw)


def sqrt(x: Tensor) -> Tensor:
    out_data = np.sqrt(x.data)

    def bw(g):
        _accum(x, g * (0.5 / out_data))

    return _make(out_data, (x,), bw)


def reciprocal(x: Tensor) -> Tensor:
    out_data = 1.0 / x.data

    def bw(g):
        _accum(x, -g * out_data * out_data)

    return _make(out_data, (x,), bw)


def relu(x: Tensor) -> Tensor:
    """max(x, 0); the derivative at exactly 0 is defined as 0."""
    mask = x.data > 0

    def bw(g):
        _accum(x, g * mask)

    return _make(np.where(mask, x.data, 0.0), (x,), bw)


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function, computed piecewise to avoid exp overflow."""
    xd = x.data
    out_data = np.empty_like(xd)
    pos = xd >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    out_data[~pos] = ex / (1.0 + ex)

    def bw(g):
        _accum(x, g * out_data * (1.0 - out_data))

    return _make(out_data, (x,), bw)


# ---------------------------------------------------------------------------
# normalization / linear algebra
# ---------------------------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` with max-subtraction for stability."""
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax: axis {axis} invalid for shape {x.shape}")
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / np.sum(e, axis=axis, keepdims=True)

    def bw(g):
        inner = np.sum(g * out_data, axis=axis, keepdims=True)
        _accum(x, (g - inner) * out_data)

    return _make(out_data, (x,), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Standard 2-D matrix product."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        _accum(a, g @ bd.T)
        _accum(b, ad.T @ g)

    return _make(ad @ bd, (a, b), bw)


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise DimensionError(f"transpose: expected a matrix, got shape {x.shape}")

    def bw(g):
        _accum(x, np.ascontiguousarray(g.T))

    return _make(x.data.T, (x,), bw)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    in_shape = x.shape

    def bw(g):
        _accum(x, g.reshape(in_shape))

    return _make(x.data.reshape(shape), (x,), bw)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = tuple(xs)
    if not xs:
        raise ContractError("concat: need at least one input")
    ref = xs[0].shape
    for t in xs[1:]:
        if t.ndim != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)
        ):
            raise DimensionError(f"concat: shape {t.shape} incompatible with {ref} on axis {axis}")
    sizes = [t.shape[axis] for t in xs]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(xs, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accum(t, np.ascontiguousarray(g[tuple(idx)]))

    return _make(np.concatenate([t.data for t in xs], axis=axis), xs, bw)


def reduce(x: Tensor, axes: int | Iterable[int], kind: str = "sum", keepdims: bool = False) -> Tensor:
    """Sum or mean over ``axes``."""
    if kind not in ("sum", "mean"):
        raise ContractError(f"reduce: unknown kind {kind!r}")
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(a % x.ndim for a in axes)
    if len(set(axes)) != len(axes):
        raise DimensionError(f"reduce: duplicate axes {axes}")
    count = 1
    for a in axes:
        count *= x.shape[a]
    out_data = np.sum(x.data, axis=axes, keepdims=keepdims)
    if kind == "mean":
        out_data = out_data / count
    kd_shape = tuple(1 if i in axes else s for i, s in enumerate(x.shape))
    in_shape = x.shape

    def bw(g):
        gk = g.reshape(kd_shape)
        if kind == "mean":
            gk = gk / count
        _accum(x, np.broadcast_to(gk, in_shape))

    return _make(out_data, (x,), bw)


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows of a matrix by integer index (duplicates allowed)."""
    if x.ndim != 2:
        raise DimensionError(f"gather_rows: expected a matrix, got shape {x.shape}")
    idx = np.asarray(idx, dtype=np.intp)
    if idx.ndim != 1:
        raise ContractError("gather_rows: index array must be 1-D")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise ContractError("gather_rows: index out of range")

    def bw(g):
        acc = np.zeros_like(x.data)
        np.add.at(acc, idx, g)
        _accum(x, acc)

    return _make(x.data[idx], (x,), bw)


def pick(x: Tensor, index: int) -> Tensor:
    """Select one element of a vector as a scalar."""
    if x.ndim != 1:
        raise DimensionError(f"pick: expected a vector, got shape {x.shape}")
    if not 0 <= index < x.shape[0]:
        raise ContractError(f"pick: index {index} out of range for length {x.shape[0]}")

    def bw(g):
        acc = np.zeros_like(x.data)
        acc[index] = g
        _accum(x, acc)

    return _make(x.data[index], (x,), bw)


def scale_by(x: Tensor, s: Tensor) -> Tensor:
    """Multiply a tensor by a scalar tensor (both differentiable)."""
    if s.ndim != 0:
        raise DimensionError(f"scale_by: scale must be rank-0, got shape {s.shape}")
    xd, sd = x.data, s.data

    def bw(g):
        _accum(x, g * sd)
        _accum(s, np.sum(g * xd))

    return _make(xd * sd, (x, s), bw)


def scale_columns(x: Tensor, s: Tensor) -> Tensor:
    """Multiply column k of a matrix by s[k]."""
    if x.ndim != 2 or s.ndim != 1 or x.shape[1] != s.shape[0]:
        raise DimensionError(f"scale_columns: incompatible shapes {x.shape} and {s.shape}")
    xd, sd = x.data, s.data

    def bw(g):
        _accum(x, g * sd[None, :])
        _accum(s, np.sum(g * xd, axis=0))

    return _make(xd * sd[None, :], (x, s), bw)


def pairwise_sq_dist(a: Tensor, b: Tensor) -> Tensor:
    """Squared Euclidean distances between all row pairs.

    Entry (i, j) is sum_d (a[i,d] - b[j,d])**2, computed from explicit
    differences (not the expanded-product form) so tiny distances keep
    full precision.
    """
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError(f"pairwise_sq_dist: feature dims differ: {a.shape} vs {b.shape}")
    diff = a.data[:, None, :] - b.data[None, :, :]
    out_data = np.einsum("ijd,ijd->ij", diff, diff)

    def bw(g):
        _accum(a, 2.0 * np.einsum("ij,ijd->id", g, diff))
        _accum(b, -2.0 * np.einsum("ij,ijd->jd", g, diff))

    return _make(out_data, (a, b), bw)


def residual_aggregate(a: Tensor, v: Tensor, c: Tensor) -> Tensor:
    """Weighted residual sum  out[k] = sum_i a[i,k] * (v[i] - c[k]).

    The residual is formed explicitly before weighting, so descriptors
    equal to a center contribute exact zeros to that center's row.
    """
    if a.ndim != 2 or v.ndim != 2 or c.ndim != 2:
        raise DimensionError("residual_aggregate: all inputs must be matrices")
    m, k = a.shape
    if v.shape[0] != m or v.shape[1] != c.shape[1] or c.shape[0] != k:
        raise DimensionError(
            f"residual_aggregate: incompatible shapes a={a.shape} v={v.shape} c={c.shape}"
        )
    diff = v.data[:, None, :] - c.data[None, :, :]
    out_data = np.einsum("mk,mkd->kd", a.data, diff)
    ad = a.data

    def bw(g):
        _accum(a, np.einsum("kd,mkd->mk", g, diff))
        _accum(v, ad @ g)
        _accum(c, -np.sum(ad, axis=0)[:, None] * g)

    return _make(out_data, (a, v, c), bw)
