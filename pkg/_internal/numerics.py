"""
numerics.py

Dense float64 tensors with define-by-run reverse-mode autodiff.

This module provides:

• Tensor: numpy-backed n-d array with an optional gradient slot.
• Tape: per-thread recorder of the ops run while it is active.
• forward(): dispatch through the kernel registry OPS.
• backward(): reverse sweep over a tape, accumulating into leaf grads.
• AdamState / adam_step(): bias-corrected Adam.
• grad_check(): central-difference gradient audit.

Ops only record when a Tape is active AND some input requires grad, so any
forward pass run outside a `with Tape()` block is gradient-free. TD targets
rely on that.
"""

import math
import threading
from collections import namedtuple
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from _internal.errors import NumericalAbort, ShapeError, TapeError

DTYPE = np.float64


# ============================================================
#                         TENSOR
# ============================================================

class Tensor:
    """
    n-d array of 64-bit reals.

    Leaves created with requires_grad=True carry a zero-initialised `grad`
    array of identical shape. Op outputs carry a reference to the tape node
    that produced them instead.
    """

    __slots__ = ("data", "requires_grad", "grad", "_creator")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=DTYPE, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self._creator = None

    @classmethod
    def _from_op(cls, data: np.ndarray, requires_grad: bool) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.ascontiguousarray(data, dtype=DTYPE)
        out.requires_grad = requires_grad
        out.grad = None
        out._creator = None
        return out

    # --------------------------
    # Introspection
    # --------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._creator is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # --------------------------
    # Operator sugar
    # --------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


# ============================================================
#                          TAPE
# ============================================================

TapeNode = namedtuple("TapeNode", ["kernel", "inputs", "output", "ctx"])

_local = threading.local()


def active_tape() -> Optional["Tape"]:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """
    Ordered record of ops, filled while used as a context manager.

    Nodes are appended in execution order, so the list is already a
    topological order; backward() walks it once in reverse.
    """

    def __init__(self):
        self.nodes: List[TapeNode] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _local.stack.pop()

    def record(self, kernel, inputs: Sequence[Tensor], output: Tensor, ctx) -> None:
        node = TapeNode(kernel, tuple(inputs), output, ctx)
        output._creator = node
        self.nodes.append(node)

    def backward(self, loss: Tensor) -> None:
        backward(self, loss)

    def __len__(self) -> int:
        return len(self.nodes)


class no_grad:
    """Suspend recording on this thread, even inside an active Tape."""

    def __enter__(self) -> None:
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(None)

    def __exit__(self, exc_type, exc, tb) -> None:
        _local.stack.pop()


# ============================================================
#                    KERNEL REGISTRY
# ============================================================

Kernel = namedtuple("Kernel", ["name", "forward", "backward"])

OPS: Dict[str, Kernel] = {}


def register(name: str):
    def wrap(pair):
        fwd, bwd = pair()
        OPS[name] = Kernel(name, fwd, bwd)
        return pair
    return wrap


def _broadcast(op: str, a: Tuple[int, ...], b: Tuple[int, ...]) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a} and {b}") from None


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum grad back down to `shape` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _elementwise(op: str, fn, dfn):
    """Binary element-wise kernel with length-1 broadcasting."""
    def fwd(a, b):
        _broadcast(op, a.shape, b.shape)
        return fn(a, b), (a, b)

    def bwd(g, ctx):
        a, b = ctx
        ga, gb = dfn(g, a, b)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
    return fwd, bwd


@register("add")
def _add():
    return _elementwise("add", np.add, lambda g, a, b: (g, g))


@register("sub")
def _sub():
    return _elementwise("sub", np.subtract, lambda g, a, b: (g, -g))


@register("mul")
def _mul():
    return _elementwise("mul", np.multiply, lambda g, a, b: (g * b, g * a))


@register("matmul")
def _matmul():
    def fwd(a, b):
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
        _broadcast("matmul", a.shape[:-2], b.shape[:-2])
        return np.matmul(a, b), (a, b)

    def bwd(g, ctx):
        a, b = ctx
        ga = np.matmul(g, np.swapaxes(b, -1, -2))
        gb = np.matmul(np.swapaxes(a, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
    return fwd, bwd


@register("scale")
def _scale():
    def fwd(x, c=1.0):
        return x * c, c

    def bwd(g, c):
        return (g * c,)
    return fwd, bwd


@register("relu")
def _relu():
    def fwd(x):
        return np.maximum(x, 0.0), x > 0

    def bwd(g, mask):
        return (g * mask,)
    return fwd, bwd


@register("elu")
def _elu():
    # alpha = 1
    def fwd(x):
        out = np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))
        return out, (x, out)

    def bwd(g, ctx):
        x, out = ctx
        return (g * np.where(x > 0, 1.0, out + 1.0),)
    return fwd, bwd


@register("sigmoid")
def _sigmoid():
    def fwd(x):
        out = 0.5 * (np.tanh(0.5 * x) + 1.0)
        return out, out

    def bwd(g, out):
        return (g * out * (1.0 - out),)
    return fwd, bwd


@register("tanh")
def _tanh():
    def fwd(x):
        out = np.tanh(x)
        return out, out

    def bwd(g, out):
        return (g * (1.0 - out * out),)
    return fwd, bwd


@register("abs")
def _abs():
    def fwd(x):
        return np.abs(x), np.sign(x)

    def bwd(g, sign):
        return (g * sign,)
    return fwd, bwd


def _expand_reduced(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


@register("sum")
def _sum():
    def fwd(x, axis=None, keepdims=False):
        return x.sum(axis=axis, keepdims=keepdims), (x.shape, axis, keepdims)

    def bwd(g, ctx):
        shape, axis, keepdims = ctx
        return (_expand_reduced(g, shape, axis, keepdims).copy(),)
    return fwd, bwd


@register("mean")
def _mean():
    def fwd(x, axis=None, keepdims=False):
        count = x.size if axis is None else x.shape[axis]
        if count == 0:
            raise ShapeError(f"mean: empty axis {axis} in shape {x.shape}")
        return x.mean(axis=axis, keepdims=keepdims), (x.shape, axis, keepdims, count)

    def bwd(g, ctx):
        shape, axis, keepdims, count = ctx
        return (_expand_reduced(g, shape, axis, keepdims) / count,)
    return fwd, bwd


@register("softmax")
def _softmax():
    def fwd(x, axis=-1):
        if x.ndim == 0 or x.shape[axis] == 0:
            raise ShapeError(f"softmax: empty axis {axis} in shape {x.shape}")
        shifted = np.exp(x - x.max(axis=axis, keepdims=True))
        out = shifted / shifted.sum(axis=axis, keepdims=True)
        return out, (out, axis)

    def bwd(g, ctx):
        out, axis = ctx
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)
    return fwd, bwd


@register("reshape")
def _reshape():
    def fwd(x, shape=()):
        shape = tuple(shape)
        if math.prod(shape) != x.size:
            raise ShapeError(f"reshape: cannot view shape {x.shape} as {shape}")
        return x.reshape(shape), x.shape

    def bwd(g, orig):
        return (g.reshape(orig),)
    return fwd, bwd


@register("concat")
def _concat():
    def fwd(*xs, axis=-1):
        if not xs:
            raise ShapeError("concat: no inputs")
        ref = list(xs[0].shape)
        for x in xs[1:]:
            other = list(x.shape)
            if len(other) != len(ref) or any(
                r != o for i, (r, o) in enumerate(zip(ref, other)) if i != axis % len(ref)
            ):
                raise ShapeError(f"concat: incompatible shapes {xs[0].shape} and {x.shape}")
        sizes = [x.shape[axis] for x in xs]
        return np.concatenate(xs, axis=axis), (sizes, axis)

    def bwd(g, ctx):
        sizes, axis = ctx
        cuts = np.cumsum(sizes)[:-1]
        return tuple(np.split(g, cuts, axis=axis))
    return fwd, bwd


@register("stack")
def _stack():
    def fwd(*xs, axis=0):
        if not xs:
            raise ShapeError("stack: no inputs")
        for x in xs[1:]:
            if x.shape != xs[0].shape:
                raise ShapeError(f"stack: incompatible shapes {xs[0].shape} and {x.shape}")
        return np.stack(xs, axis=axis), (len(xs), axis)

    def bwd(g, ctx):
        count, axis = ctx
        return tuple(np.take(g, i, axis=axis) for i in range(count))
    return fwd, bwd


# ============================================================
#                   FORWARD DISPATCH
# ============================================================

def forward(op_kind: str, *inputs, **attrs) -> Tensor:
    """
    Run kernel `op_kind` on `inputs` and record it on the active tape when
    any input requires grad.
    """
    kernel = OPS.get(op_kind)
    if kernel is None:
        raise ValueError(f"unknown op kind {op_kind!r}; registered: {sorted(OPS)}")

    tensors = [as_tensor(x) for x in inputs]
    out, ctx = kernel.forward(*(t.data for t in tensors), **attrs)

    tape = active_tape()
    track = tape is not None and any(t.requires_grad for t in tensors)
    result = Tensor._from_op(out, requires_grad=track)
    if track:
        tape.record(kernel, tensors, result, ctx)
    return result


def add(a, b) -> Tensor:
    return forward("add", a, b)


def sub(a, b) -> Tensor:
    return forward("sub", a, b)


def mul(a, b) -> Tensor:
    return forward("mul", a, b)


def matmul(a, b) -> Tensor:
    return forward("matmul", a, b)


def scale(x, c: float) -> Tensor:
    return forward("scale", x, c=float(c))


def relu(x) -> Tensor:
    return forward("relu", x)


def elu(x) -> Tensor:
    return forward("elu", x)


def sigmoid(x) -> Tensor:
    return forward("sigmoid", x)


def tanh(x) -> Tensor:
    return forward("tanh", x)


def absolute(x) -> Tensor:
    return forward("abs", x)


def reduce_sum(x, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    return forward("sum", x, axis=axis, keepdims=keepdims)


def reduce_mean(x, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    return forward("mean", x, axis=axis, keepdims=keepdims)


def softmax(x, axis: int = -1) -> Tensor:
    return forward("softmax", x, axis=axis)


def reshape(x, shape: Sequence[int]) -> Tensor:
    return forward("reshape", x, shape=tuple(shape))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    return forward("concat", *tensors, axis=axis)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    return forward("stack", *tensors, axis=axis)


# ============================================================
#                       BACKWARD
# ============================================================

def backward(tape: Tape, loss: Tensor) -> None:
    """
    Accumulate ∂loss/∂leaf into every requires_grad leaf reached from loss.

    Gradients ADD to whatever is already in leaf.grad; zero them between
    optimisation steps. A tape can be replayed only once.
    """
    if tape.consumed:
        raise TapeError("backward: tape already replayed; record a fresh forward pass")
    if loss.size != 1:
        raise TapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    tape.consumed = True

    if not loss.requires_grad:
        return
    if loss.is_leaf:
        loss.grad = loss.grad + 1.0
        return

    pending: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = pending.pop(id(node.output), None)
        if g is None:
            continue
        for tensor, grad in zip(node.inputs, node.kernel.backward(g, node.ctx)):
            if grad is None or not tensor.requires_grad:
                continue
            if tensor.is_leaf:
                if tensor.grad is None:
                    tensor.grad = np.zeros_like(tensor.data)
                tensor.grad += grad
            else:
                key = id(tensor)
                pending[key] = pending[key] + grad if key in pending else grad


# ============================================================
#                         ADAM
# ============================================================

@dataclass
class AdamState:
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)
    t: int = 0
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **hyper) -> "AdamState":
        return cls(
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
            **hyper,
        )


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState) -> None:
    """Bias-corrected Adam update, in place. Rejects non-finite gradients."""
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise ShapeError(
            f"adam_step: {len(params)} params, {len(grads)} grads, {len(state.m)} moments"
        )
    for i, (p, g, m) in enumerate(zip(params, grads, state.m)):
        if p.shape != np.shape(g) or p.shape != m.shape:
            raise ShapeError(f"adam_step: parameter #{i} shape {p.shape} vs grad {np.shape(g)}")
        if not np.all(np.isfinite(g)):
            raise NumericalAbort(f"adam_step: non-finite gradient in parameter #{i} {p.shape}")

    state.t += 1
    correction1 = 1.0 - state.beta1 ** state.t
    correction2 = 1.0 - state.beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= state.lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)


def global_grad_norm(grads: Sequence[np.ndarray]) -> float:
    return float(math.sqrt(sum(float(np.sum(g * g)) for g in grads)))


# ============================================================
#                    GRADIENT CHECK
# ============================================================

GradCheckReport = namedtuple("GradCheckReport", ["max_rel_err", "passed", "n_coords"])


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
) -> GradCheckReport:
    """
    Compare tape gradients of the scalar f() against central differences.

    rel_err = |a - n| / max(1e-8, |a| + |n|) per coordinate; pass iff the
    worst coordinate is within tol. `f` must read the params it is given.
    """
    if h <= 0:
        raise ValueError(f"grad_check: step h must be positive, got {h}")

    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = f()
    backward(tape, loss)
    analytic = [p.grad.copy() for p in params]

    worst = 0.0
    coords = 0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        a_flat = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = f().item()
            flat[i] = orig - h
            f_minus = f().item()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            err = abs(a_flat[i] - numeric) / max(1e-8, abs(a_flat[i]) + abs(numeric))
            worst = max(worst, err)
            coords += 1

    return GradCheckReport(max_rel_err=worst, passed=worst <= tol, n_coords=coords)
