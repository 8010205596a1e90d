"""Dense real tensors with reverse-mode automatic differentiation.

Everything downstream (models, training) is built from the primitives in
this module.  A ``Tensor`` wraps a row-major float64 numpy array and, when
gradients are enabled, remembers the primitive application that produced it.
The resulting links form an acyclic tape; ``topo_order`` linearizes it and
``Tensor.backward`` walks it in reverse, accumulating vector-Jacobian
products into the leaves marked ``requires_grad=True``.

Only first-order derivatives are supported: vjp closures compute with raw
numpy arrays, so differentiating through a backward pass is not possible.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

DTYPE = np.float64

# Additive sentinel standing in for -inf in causal masks.  Large enough that
# exp(sentinel - rowmax) underflows to exactly 0.0, small enough to stay
# finite under the non-finite checks.
MASK_SENTINEL = -1.0e30

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

_grad_enabled = True


class ShapeMismatchError(ValueError):
    """Raised when primitive inputs have incompatible shapes."""


class NonFiniteError(FloatingPointError):
    """Raised when a NaN/Inf enters or leaves a primitive."""


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (forward-only evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values in output of '{op}'")


class Tensor:
    """A numpy-backed value node in the autodiff tape.

    Leaves are constructed directly (``Tensor(data, requires_grad=...)``);
    interior nodes are produced by the primitive functions below.  Data is
    treated as immutable once wrapped.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_vjp", "op")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data, dtype=DTYPE)
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteError(f"non-finite values in tensor {name or '<leaf>'}")
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], tuple] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``grad`` of every differentiable leaf.

        ``self`` must be a scalar (size-1) tensor.
        """
        if self.data.size != 1:
            raise ShapeMismatchError(
                f"backward requires a scalar output, got shape {self.data.shape}"
            )
        order = topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._parents == () or node._vjp is None:
                if node.requires_grad:
                    node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; all dispatch to the primitives below.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(other, mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return divide(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def topo_order(output: Tensor) -> list[Tensor]:
    """Topologically ordered tape (iterative DFS; graphs can be deep)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(output, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def gradients(output: Tensor, leaves: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradient of a scalar ``output`` w.r.t. each leaf, zeros if unreached.

    Every requested leaf must have been built with ``requires_grad=True``;
    asking for the gradient of a non-differentiable leaf is always a bug.
    """
    for leaf in leaves:
        if not leaf.requires_grad:
            raise ValueError(
                f"leaf {leaf.name or '<unnamed>'} does not require grad"
            )
        leaf.grad = None
    output.backward()
    return [
        leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        for leaf in leaves
    ]


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (adjoint of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _node(data: np.ndarray, op: str, parents: tuple[Tensor, ...], vjp) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = ""
    out.grad = None
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjp = None
    return out


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeMismatchError(
            f"{op}: shapes {a.data.shape} and {b.data.shape} do not broadcast"
        ) from None


# ---------------------------------------------------------------------------
# Elementwise and linear-algebra primitives
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "add")
    data = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _node(data, "add", (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "mul")
    data = a.data * b.data

    def vjp(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _node(data, "mul", (a, b), vjp)


def divide(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "divide")
    data = a.data / b.data

    def vjp(g):
        return (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        )

    return _node(data, "divide", (a, b), vjp)


def maximum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "maximum")
    data = np.maximum(a.data, b.data)

    def vjp(g):
        # Ties split evenly; subgradient choice, measure-zero for random data.
        wa = np.where(a.data > b.data, 1.0, np.where(a.data == b.data, 0.5, 0.0))
        return (
            _unbroadcast(g * wa, a.data.shape),
            _unbroadcast(g * (1.0 - wa), b.data.shape),
        )

    return _node(data, "maximum", (a, b), vjp)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatchError(
            f"matmul: operands must be at least 2-D, got {a.data.shape} and {b.data.shape}"
        )
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeMismatchError(
            f"matmul: inner dims differ, {a.data.shape} @ {b.data.shape}"
        )
    data = a.data @ b.data

    def vjp(g):
        ga = g @ b.data.swapaxes(-1, -2)
        gb = a.data.swapaxes(-1, -2) @ g
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return _node(data, "matmul", (a, b), vjp)


def tanh(x) -> Tensor:
    x = as_tensor(x)
    data = np.tanh(x.data)

    def vjp(g):
        return ((1.0 - data * data) * g,)

    return _node(data, "tanh", (x,), vjp)


def exp(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        data = np.exp(x.data)

    def vjp(g):
        return (data * g,)

    return _node(data, "exp", (x,), vjp)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    data = np.where(x.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(x.data))),
                    np.exp(-np.abs(x.data)) / (1.0 + np.exp(-np.abs(x.data))))

    def vjp(g):
        return (data * (1.0 - data) * g,)

    return _node(data, "sigmoid", (x,), vjp)


def softplus(x) -> Tensor:
    x = as_tensor(x)
    data = np.logaddexp(0.0, x.data)

    def vjp(g):
        s = np.where(x.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(x.data))),
                     np.exp(-np.abs(x.data)) / (1.0 + np.exp(-np.abs(x.data))))
        return (s * g,)

    return _node(data, "softplus", (x,), vjp)


def relu(x) -> Tensor:
    x = as_tensor(x)
    data = np.maximum(x.data, 0.0)

    def vjp(g):
        return ((x.data > 0) * g,)

    return _node(data, "relu", (x,), vjp)


def gelu(x) -> Tensor:
    """Exact (erf-based) GELU."""
    x = as_tensor(x)
    phi_cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    data = x.data * phi_cdf

    def vjp(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI
        return ((phi_cdf + x.data * pdf) * g,)

    return _node(data, "gelu", (x,), vjp)


def square(x) -> Tensor:
    x = as_tensor(x)
    data = x.data * x.data

    def vjp(g):
        return (2.0 * x.data * g,)

    return _node(data, "square", (x,), vjp)


# ---------------------------------------------------------------------------
# Last-axis reductions and normalizations
# ---------------------------------------------------------------------------

def softmax(x) -> Tensor:
    """Softmax over the last axis (shift-stable)."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        inner = (g * data).sum(axis=-1, keepdims=True)
        return (data * (g - inner),)

    return _node(data, "softmax", (x,), vjp)


LAYER_NORM_EPS = 1.0e-5


def layer_norm(x) -> Tensor:
    """Zero-mean, unit-variance normalization over the last axis (eps 1e-5).

    A constant vector maps to all zeros.  Learnable gain/bias are applied by
    callers via mul/add.
    """
    x = as_tensor(x)
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
    data = centered * inv

    def vjp(g):
        gm = g.mean(axis=-1, keepdims=True)
        gym = (g * data).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - data * gym),)

    return _node(data, "layer_norm", (x,), vjp)


def reduce_mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    data = x.data.mean(axis=axis, keepdims=keepdims)
    n = x.data.size if axis is None else np.prod(
        [x.data.shape[a] for a in np.atleast_1d(axis)]
    )

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, x.data.shape).copy(),)

    return _node(np.asarray(data), "reduce_mean", (x,), vjp)


def reduce_sum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.data.shape).copy(),)

    return _node(np.asarray(data), "reduce_sum", (x,), vjp)


def reduce_max(x, axis: int = -1, keepdims: bool = True) -> Tensor:
    x = as_tensor(x)
    data = x.data.max(axis=axis, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        full = data if keepdims else np.expand_dims(data, axis)
        mask = (x.data == full).astype(DTYPE)
        mask /= mask.sum(axis=axis, keepdims=True)
        return (mask * g,)

    return _node(data, "reduce_max", (x,), vjp)


# ---------------------------------------------------------------------------
# Structural primitives
# ---------------------------------------------------------------------------

def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise ShapeMismatchError(
            f"reshape: cannot view {x.data.shape} as {tuple(shape)}"
        ) from None

    def vjp(g):
        return (g.reshape(x.data.shape),)

    return _node(data, "reshape", (x,), vjp)


def swapaxes(x, axis1: int, axis2: int) -> Tensor:
    x = as_tensor(x)
    data = np.ascontiguousarray(x.data.swapaxes(axis1, axis2))

    def vjp(g):
        return (g.swapaxes(axis1, axis2),)

    return _node(data, "swapaxes", (x,), vjp)


def slice_(x, key) -> Tensor:
    """Basic (non-fancy) slicing; the adjoint scatters into a zero tensor."""
    x = as_tensor(x)
    data = x.data[key]
    if data.base is not None:
        data = data.copy()

    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[key] = g
        return (gx,)

    return _node(data, "slice", (x,), vjp)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeMismatchError("concat: empty input list")
    try:
        data = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeMismatchError(
            f"concat: incompatible shapes {[t.data.shape for t in ts]}"
        ) from None
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _node(data, "concat", tuple(ts), vjp)


def causal_mask(scores) -> Tensor:
    """Add the -inf sentinel to strictly-future positions (j > i).

    The last two axes are interpreted as (query, key).  Additive, so the
    adjoint is the identity.
    """
    scores = as_tensor(scores)
    t_q, t_k = scores.data.shape[-2], scores.data.shape[-1]
    if t_q != t_k:
        raise ShapeMismatchError(
            f"causal-mask: last two axes must be square, got {scores.data.shape}"
        )
    mask = np.triu(np.full((t_q, t_k), MASK_SENTINEL, dtype=DTYPE), k=1)
    data = scores.data + mask

    def vjp(g):
        return (g,)

    return _node(data, "causal_mask", (scores,), vjp)


# ---------------------------------------------------------------------------
# Sequence primitives with hand-written adjoints
# ---------------------------------------------------------------------------

def causal_conv(x, taps) -> Tensor:
    """Per-channel causal convolution: out[..., t, c] = sum_l taps[l, c] * x[..., t-l, c].

    ``x`` is (..., T, C) and ``taps`` is (L, C) with L <= T.  Differentiable
    in both arguments.
    """
    x, taps = as_tensor(x), as_tensor(taps)
    if taps.ndim != 2:
        raise ShapeMismatchError(f"causal_conv: taps must be 2-D (L, C), got {taps.data.shape}")
    T, C = x.data.shape[-2], x.data.shape[-1]
    L = taps.data.shape[0]
    if taps.data.shape[1] != C:
        raise ShapeMismatchError(
            f"causal_conv: channel mismatch, x {x.data.shape} vs taps {taps.data.shape}"
        )
    if L > T:
        raise ShapeMismatchError(f"causal_conv: filter length {L} exceeds sequence length {T}")
    xd, td = x.data, taps.data
    data = np.zeros_like(xd)
    for lag in range(L):
        if lag == 0:
            data += td[0] * xd
        else:
            data[..., lag:, :] += td[lag] * xd[..., :T - lag, :]

    def vjp(g):
        gx = np.zeros_like(xd)
        gt = np.zeros_like(td)
        lead = tuple(range(g.ndim - 2))
        for lag in range(L):
            if lag == 0:
                gx += td[0] * g
                gt[0] = (xd * g).sum(axis=lead + (-2,))
            else:
                gx[..., :T - lag, :] += td[lag] * g[..., lag:, :]
                gt[lag] = (xd[..., :T - lag, :] * g[..., lag:, :]).sum(axis=lead + (-2,))
        return gx, gt

    return _node(data, "causal_conv", (x, taps), vjp)


def selective_scan(decay, drive) -> Tensor:
    """Linear recurrence h_t = decay_t * h_{t-1} + drive_t with h_{-1} = 0.

    Both inputs are (..., T, C) (or (..., T, C, N)); the scan runs over the
    T axis, which must be axis -2 for 3-D inputs and -3 for 4-D inputs —
    concretely, the axis is inferred as ``ndim - time_axis_offset`` where the
    trailing axes after T are channel-like.  Here T is always axis 1 for the
    (B, T, ...) layouts this package uses, so the scan axis is fixed at 1.
    """
    decay, drive = as_tensor(decay), as_tensor(drive)
    if decay.data.shape != drive.data.shape:
        raise ShapeMismatchError(
            f"selective_scan: shapes differ, {decay.data.shape} vs {drive.data.shape}"
        )
    if decay.ndim < 2:
        raise ShapeMismatchError("selective_scan: inputs must be at least (T, C)")
    axis = 0 if decay.ndim == 2 else 1
    a, u = decay.data, drive.data
    T = a.shape[axis]
    h = np.zeros_like(a)
    state = np.zeros_like(np.take(a, 0, axis=axis))
    sl = [slice(None)] * a.ndim
    for t in range(T):
        sl[axis] = t
        idx = tuple(sl)
        state = a[idx] * state + u[idx]
        h[idx] = state

    def vjp(g):
        ga = np.zeros_like(a)
        gu = np.zeros_like(u)
        carry = np.zeros_like(state)
        for t in range(T - 1, -1, -1):
            sl[axis] = t
            idx = tuple(sl)
            carry = carry + g[idx]
            gu[idx] = carry
            if t > 0:
                sl[axis] = t - 1
                prev = tuple(sl)
                ga[idx] = carry * h[prev]
                carry = carry * a[idx]
            else:
                ga[idx] = 0.0
        return ga, gu

    return _node(h, "selective_scan", (decay, drive), vjp)


# ---------------------------------------------------------------------------
# Dispatcher over the documented primitive set
# ---------------------------------------------------------------------------

_PRIMITIVES: dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "tanh": tanh,
    "exp": exp,
    "gelu-or-relu": gelu,  # GELU chosen (GPT-2 lineage); relu() stays available
    "softmax-last-axis": softmax,
    "layer-norm-last-axis": layer_norm,
    "causal-mask": causal_mask,
    "slice": slice_,
    "concat": concat,
    "reshape": reshape,
    "reduce-mean": reduce_mean,
    "square": square,
}


def forward_primitive(kind: str, *inputs, **kwargs) -> Tensor:
    """Apply a primitive by name. ``kind`` must be one of the documented set."""
    try:
        fn = _PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive kind '{kind}'") from None
    if kind == "concat":
        return fn(list(inputs), **kwargs)
    return fn(*inputs, **kwargs)
