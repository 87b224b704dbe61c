"""Dense tensors plus a reverse-mode autodiff tape.

Activations are NCHW, convolution weights OIHW, payloads float32 or float64
numpy arrays.  Differentiable ops execute eagerly and, while a tape is being
recorded (``with record() as tape:``), append one node each.  Execution order
is a topological order by construction, so ``backward`` simply replays the
node list in reverse, visiting every op exactly once.  One tape is recorded
per training step and discarded after its backward pass.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from .errors import ShapeError
from .rng import Stream

DTYPES = {"float32": np.float32, "float64": np.float64}


class Tensor:
    """A dense n-d array, optionally carrying a same-shape gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data: np.ndarray, requires_grad: bool = False):
        if data.dtype not in (np.float32, np.float64):
            raise TypeError(f"tensors are float32/float64, got {data.dtype}")
        self.data = data
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """A named, gradient-enabled tensor owned by a model.

    ``kind`` routes the parameter to its statistics group and lets the
    optimizer and checkpoint code treat families uniformly.
    """

    KINDS = (
        "conv_weight",
        "bn_weight",
        "bn_bias",
        "conv_bias",
        "fusion_scalar",
        "fusion_channel",
        "gate_weight",
    )

    __slots__ = ("name", "kind")

    def __init__(self, name: str, data: np.ndarray, kind: str):
        if kind not in self.KINDS:
            raise ValueError(f"unknown parameter kind {kind!r}")
        super().__init__(data, requires_grad=True)
        self.name = name
        self.kind = kind
        self.grad = np.zeros_like(data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, kind={self.kind})"


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of executed differentiable ops."""

    def __init__(self):
        self.nodes: list[_Node] = []


_ACTIVE: Tape | None = None


@contextmanager
def record():
    """Record differentiable ops onto a fresh tape for one forward pass."""
    global _ACTIVE
    prev, tape = _ACTIVE, Tape()
    _ACTIVE = tape
    try:
        yield tape
    finally:
        _ACTIVE = prev


def recording() -> bool:
    return _ACTIVE is not None


def push(out: Tensor, inputs: tuple, backward_fn) -> Tensor:
    """Append a tape node if recording and any input needs a gradient.

    ``backward_fn(g)`` receives the output gradient and must accumulate into
    the inputs via :func:`accumulate`.
    """
    if _ACTIVE is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _ACTIVE.nodes.append(_Node(out, inputs, backward_fn))
    return out


def accumulate(t: Tensor, g: np.ndarray):
    """Add ``g`` into ``t.grad`` (allocating it on first touch)."""
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def backward(loss: Tensor, tape: Tape):
    """Populate d(loss)/d(x) on every tensor reachable from ``loss``.

    Parameters keep their pre-allocated buffers, so anything the loss does
    not depend on simply retains a zero gradient.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss.grad is None:
        loss.grad = np.zeros_like(loss.data)
    loss.grad += np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        if node.out.grad is None:
            continue
        node.backward(node.out.grad)


# ---------------------------------------------------------------------------
# Creation


def create(shape, dtype: str = "float32", init="zeros") -> Tensor:
    """Create a tensor from an init spec.

    ``init`` is one of ``"zeros"``, ``"ones"``, ``("constant", c)`` or
    ``("normal", mean, std, seed)``.  Normal draws come from the package
    Stream (SplitMix64 counter + Box-Muller), so a seed pins the exact bits
    on every platform.
    """
    shape = tuple(int(s) for s in shape)
    if any(s < 1 for s in shape):
        raise ShapeError(f"extents must be positive, got {shape}")
    if dtype not in DTYPES:
        raise TypeError(f"dtype must be one of {sorted(DTYPES)}, got {dtype!r}")
    np_dtype = DTYPES[dtype]
    if init == "zeros":
        return Tensor(np.zeros(shape, np_dtype))
    if init == "ones":
        return Tensor(np.ones(shape, np_dtype))
    kind = init[0]
    if kind == "constant":
        return Tensor(np.full(shape, init[1], np_dtype))
    if kind == "normal":
        _, mean, std, seed = init
        vals = Stream(seed).normal(int(np.prod(shape)), mean, std)
        return Tensor(vals.reshape(shape).astype(np_dtype))
    raise ValueError(f"unknown init spec {init!r}")


def from_array(arr, dtype=None, requires_grad: bool = False) -> Tensor:
    a = np.asarray(arr)
    if dtype is not None:
        a = a.astype(DTYPES[dtype] if isinstance(dtype, str) else dtype)
    elif a.dtype not in (np.float32, np.float64):
        a = a.astype(np.float32)
    return Tensor(a, requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# Elementwise ops


def _require_same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")
    if a.dtype != b.dtype:
        raise TypeError(f"{op}: dtypes {a.dtype} and {b.dtype} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "add")
    out = Tensor(a.data + b.data)

    def bwd(g):
        accumulate(a, g)
        accumulate(b, g)

    return push(out, (a, b), bwd)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    return g.sum(axis=axes, keepdims=True) if axes else g


def mul_elementwise(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product. Same shape, or equal-rank with size-1 axes
    broadcasting (single-channel gate maps against full feature maps)."""
    if a.dtype != b.dtype:
        raise TypeError(f"mul: dtypes {a.dtype} and {b.dtype} differ")
    if len(a.shape) != len(b.shape) or any(
        sa != sb and sa != 1 and sb != 1 for sa, sb in zip(a.shape, b.shape)
    ):
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} are incompatible")
    out = Tensor(a.data * b.data)

    def bwd(g):
        accumulate(a, _unbroadcast(g * b.data, a.shape))
        accumulate(b, _unbroadcast(g * a.data, b.shape))

    return push(out, (a, b), bwd)


def mul_scalar(a: Tensor, c) -> Tensor:
    """Multiply by a python float or by a one-element (possibly learnable)
    tensor.  ``c == 1.0`` returns bit-identical data."""
    if isinstance(c, Tensor):
        if c.data.size != 1:
            raise ShapeError(f"mul_scalar: scale must be one element, got {c.shape}")
        out = Tensor(a.data * c.data.reshape(()))

        def bwd(g):
            accumulate(a, g * c.data.reshape(()))
            accumulate(c, np.array(np.sum(g * a.data), a.dtype).reshape(c.shape))

        return push(out, (a, c), bwd)

    cval = float(c)
    out = Tensor(a.data * a.dtype.type(cval))

    def bwd_const(g):
        accumulate(a, g * a.dtype.type(cval))

    return push(out, (a,), bwd_const)


def tsum(a: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    out = Tensor(np.asarray(a.data.sum(), dtype=a.dtype))

    def bwd(g):
        accumulate(a, np.broadcast_to(g, a.shape).astype(a.dtype))

    return push(out, (a,), bwd)


def concat_channels(xs: list[Tensor]) -> Tensor:
    """Concatenate NCHW tensors along the channel axis, order preserved."""
    if len(xs) == 0:
        raise ValueError("concat_channels: need at least one input")
    first = xs[0]
    for x in xs[1:]:
        if x.data.ndim != first.data.ndim or x.data.ndim != 4:
            raise ShapeError("concat_channels: inputs must be rank-4 NCHW")
        if (x.shape[0], x.shape[2], x.shape[3]) != (first.shape[0], first.shape[2], first.shape[3]):
            raise ShapeError(
                f"concat_channels: batch/spatial mismatch {first.shape} vs {x.shape}"
            )
        if x.dtype != first.dtype:
            raise TypeError("concat_channels: mixed dtypes")
    if first.data.ndim != 4:
        raise ShapeError("concat_channels: inputs must be rank-4 NCHW")
    if len(xs) == 1:
        x = xs[0]
        out = Tensor(x.data)

        def bwd_one(g):
            accumulate(x, g)

        return push(out, (x,), bwd_one)

    out = Tensor(np.concatenate([x.data for x in xs], axis=1))
    splits = np.cumsum([x.shape[1] for x in xs])[:-1]

    def bwd(g):
        for x, gx in zip(xs, np.split(g, splits, axis=1)):
            accumulate(x, gx)

    return push(out, tuple(xs), bwd)
