"""Minimal dense-tensor numerical core.

Every value is a float64 numpy array (2-D matrices, 1-D vectors, 0-d
scalars).  ``Tensor`` wraps one array together with the bookkeeping for
reverse-mode differentiation: while a ``Tape`` is attached, each operation
appends a node, and ``backward`` replays the nodes in reverse order to
accumulate a gradient for every watched parameter.  The op set is exactly
what dense MLPs, affinity graphs and log-sum-exp contrastive losses need;
log-sum-exp subtracts the row maximum so large similarity/temperature
ratios cannot overflow.

A tape is meant for a single forward/backward cycle.  ``backward`` releases
the watched parameters afterwards, so reusing the same parameter tensors on
a fresh tape (the normal training-step pattern) never leaks nodes, and
forward passes without a tape record nothing.

Matrix products go through numpy's BLAS.  Those kernels are deterministic
for a fixed environment; set ``GLC_THREADS=1`` (exported before numpy is
loaded, e.g. via OMP_NUM_THREADS) if bit-stable timings across machines
with different BLAS thread pools matter.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, ShapeError


class Tensor:
    """A float64 array plus the bookkeeping reverse mode needs."""

    __slots__ = ("data", "requires_grad", "tape", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.tape = None
        self._parents = ()
        self._vjp = None

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar -------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    @property
    def T(self):
        return transpose(self)


class Tape:
    """Ordered record of the primitive operations of one forward pass."""

    def __init__(self):
        self._nodes = []
        self._watched = []

    def watch(self, param):
        """Register ``param`` so ``backward`` reports its gradient."""
        if not isinstance(param, Tensor):
            raise TypeError("can only watch Tensor parameters")
        if param.tape is self:
            return
        param.tape = self
        param.requires_grad = True
        self._watched.append(param)

    @property
    def watched(self):
        return list(self._watched)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad, shape):
    """Reduce ``grad`` back to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _attach(data, parents, vjp):
    """Build the result tensor and record it if a live tape is involved."""
    tape = None
    for p in parents:
        t = p.tape
        if t is not None:
            if tape is None:
                tape = t
            elif tape is not t:
                raise ValueError("operands were recorded on different tapes")
    out = Tensor(data)
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.tape = tape
        out._parents = parents
        out._vjp = vjp
        tape._nodes.append(out)
    return out


# ---------------------------------------------------------------------------
# primitive operations
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = _wrap(a), _wrap(b)

    def vjp(g):
        return (_unbroadcast(g, a.data.shape) if a.requires_grad else None,
                _unbroadcast(g, b.data.shape) if b.requires_grad else None)

    return _attach(a.data + b.data, (a, b), vjp)


def sub(a, b):
    a, b = _wrap(a), _wrap(b)

    def vjp(g):
        return (_unbroadcast(g, a.data.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.data.shape) if b.requires_grad else None)

    return _attach(a.data - b.data, (a, b), vjp)


def mul(a, b):
    a, b = _wrap(a), _wrap(b)

    def vjp(g):
        return (_unbroadcast(g * b.data, a.data.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.data.shape) if b.requires_grad else None)

    return _attach(a.data * b.data, (a, b), vjp)


def div(a, b):
    a, b = _wrap(a), _wrap(b)

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.data.shape) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)
        return ga, gb

    return _attach(a.data / b.data, (a, b), vjp)


def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul expects 2-D operands")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul shapes do not chain: {a.data.shape} @ {b.data.shape}")

    def vjp(g):
        return (g @ b.data.T if a.requires_grad else None,
                a.data.T @ g if b.requires_grad else None)

    return _attach(a.data @ b.data, (a, b), vjp)


def transpose(a):
    a = _wrap(a)

    def vjp(g):
        return (g.T if a.requires_grad else None,)

    return _attach(a.data.T, (a,), vjp)


def relu(a):
    """Elementwise max(x, 0); the subgradient at exactly 0 is 0."""
    a = _wrap(a)
    on = a.data > 0.0

    def vjp(g):
        return (g * on if a.requires_grad else None,)

    return _attach(np.where(on, a.data, 0.0), (a,), vjp)


def exp(a):
    a = _wrap(a)
    out = np.exp(a.data)

    def vjp(g):
        return (g * out if a.requires_grad else None,)

    return _attach(out, (a,), vjp)


def log(a):
    a = _wrap(a)

    def vjp(g):
        return (g / a.data if a.requires_grad else None,)

    return _attach(np.log(a.data), (a,), vjp)


def sqrt(a):
    a = _wrap(a)
    out = np.sqrt(a.data)

    def vjp(g):
        return (g * (0.5 / out) if a.requires_grad else None,)

    return _attach(out, (a,), vjp)


def tsum(a, axis=None, keepdims=False):
    """Sum over all entries (axis=None) or along one axis."""
    a = _wrap(a)
    shape = a.data.shape

    def vjp(g):
        if not a.requires_grad:
            return (None,)
        if axis is None:
            return (np.full(shape, float(g)),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, shape).copy(),)

    return _attach(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), vjp)


def concat_rows(parts):
    """Stack 2-D tensors along axis 0."""
    parts = tuple(_wrap(p) for p in parts)
    if not parts:
        raise ShapeError("concat_rows needs at least one part")
    sizes = [p.data.shape[0] for p in parts]

    def vjp(g):
        outs, offset = [], 0
        for p, size in zip(parts, sizes):
            outs.append(g[offset:offset + size] if p.requires_grad else None)
            offset += size
        return tuple(outs)

    return _attach(np.concatenate([p.data for p in parts], axis=0), parts, vjp)


def concat_cols(parts):
    """Stack 2-D tensors along axis 1."""
    parts = tuple(_wrap(p) for p in parts)
    if not parts:
        raise ShapeError("concat_cols needs at least one part")
    widths = [p.data.shape[1] for p in parts]

    def vjp(g):
        outs, offset = [], 0
        for p, width in zip(parts, widths):
            outs.append(g[:, offset:offset + width] if p.requires_grad else None)
            offset += width
        return tuple(outs)

    return _attach(np.concatenate([p.data for p in parts], axis=1), parts, vjp)


def take_rows(a, idx):
    """Select rows (or 1-D entries) by index; duplicates accumulate in reverse."""
    a = _wrap(a)
    idx = np.asarray(idx, dtype=np.intp)

    def vjp(g):
        if not a.requires_grad:
            return (None,)
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return _attach(a.data[idx], (a,), vjp)


def gather_pairs(a, rows, cols):
    """1-D gather of a[rows[k], cols[k]] from a 2-D tensor."""
    a = _wrap(a)
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)

    def vjp(g):
        if not a.requires_grad:
            return (None,)
        out = np.zeros_like(a.data)
        np.add.at(out, (rows, cols), g)
        return (out,)

    return _attach(a.data[rows, cols], (a,), vjp)


def gather_cols(a, cols, rows=None):
    """2-D gather: out[r, c] = a[rows[r], cols[r, c]] (rows defaults to arange)."""
    a = _wrap(a)
    cols = np.asarray(cols, dtype=np.intp)
    if cols.ndim != 2:
        raise ShapeError("gather_cols expects a 2-D column index matrix")
    if rows is None:
        rows = np.arange(cols.shape[0], dtype=np.intp)
    else:
        rows = np.asarray(rows, dtype=np.intp)
    row_grid = np.broadcast_to(rows[:, None], cols.shape)

    def vjp(g):
        if not a.requires_grad:
            return (None,)
        out = np.zeros_like(a.data)
        np.add.at(out, (row_grid, cols), g)
        return (out,)

    return _attach(a.data[row_grid, cols], (a,), vjp)


def logsumexp_rows(a, mask=None):
    """Row-wise log(sum(exp(x))) over entries where ``mask`` is True.

    Uses max subtraction for stability.  Every row must keep at least one
    included entry.
    """
    a = _wrap(a)
    x = a.data
    if x.ndim != 2:
        raise ShapeError("logsumexp_rows expects a 2-D tensor")
    if mask is None:
        masked = x
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape:
            raise ShapeError("mask shape must match the tensor")
        if not mask.any(axis=1).all():
            raise ShapeError("logsumexp_rows: a row excludes every entry")
        masked = np.where(mask, x, -np.inf)
    m = masked.max(axis=1, keepdims=True)
    e = np.exp(masked - m)
    s = e.sum(axis=1, keepdims=True)
    out = (m + np.log(s)).reshape(-1)
    softmax = e / s

    def vjp(g):
        return (g[:, None] * softmax if a.requires_grad else None,)

    return _attach(out, (a,), vjp)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def backward(tape, loss):
    """Accumulate d(loss)/d(param) for every watched parameter.

    Returns a dict keyed by the parameter tensors; parameters that do not
    influence the loss get zero gradients.  The tape's watched parameters
    are released afterwards, so subsequent tape-less forward passes record
    nothing.
    """
    if not isinstance(loss, Tensor) or loss.tape is not tape:
        raise ValueError("loss was not computed on this tape")
    if loss.data.size != 1:
        raise ShapeError("loss must be a scalar")

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape._nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None:
                continue
            held = grads.get(id(parent))
            grads[id(parent)] = pg if held is None else held + pg

    result = {}
    for param in tape._watched:
        g = grads.get(id(param))
        result[param] = np.zeros_like(param.data) if g is None else np.asarray(g)
        param.tape = None
    return result


# ---------------------------------------------------------------------------
# MLP layers
# ---------------------------------------------------------------------------

@dataclass
class Layer:
    weight: Tensor          # (out, in)
    bias: Tensor            # (out,)
    activation: str = "identity"   # "relu" | "identity"

    def __post_init__(self):
        w, b = self.weight.data, self.bias.data
        if w.ndim != 2 or b.ndim != 1 or b.shape[0] != w.shape[0]:
            raise ShapeError(f"layer shapes inconsistent: W{w.shape} b{b.shape}")
        if self.activation not in ("relu", "identity"):
            raise ValueError(f"unknown activation {self.activation!r}")


class Mlp:
    """Fully connected stack: hidden layers ReLU, final layer identity."""

    def __init__(self, layers):
        if not layers:
            raise ShapeError("an MLP needs at least one layer")
        for a, b in zip(layers, layers[1:]):
            if b.weight.data.shape[1] != a.weight.data.shape[0]:
                raise ShapeError("layer widths do not chain")
        if layers[-1].activation != "identity":
            raise ShapeError("the final layer must use the identity activation")
        self.layers = list(layers)

    @classmethod
    def create(cls, sizes, rng):
        """Initialize from layer widths with fan-in-scaled uniform noise."""
        if len(sizes) < 2:
            raise ShapeError("need an input and an output width")
        layers = []
        for i, (fan_in, fan_out) in enumerate(zip(sizes, sizes[1:])):
            limit = 1.0 / math.sqrt(fan_in)
            weight = Tensor(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
            bias = Tensor(rng.uniform(-limit, limit, size=fan_out))
            act = "identity" if i == len(sizes) - 2 else "relu"
            layers.append(Layer(weight, bias, act))
        return cls(layers)

    @property
    def in_dim(self):
        return self.layers[0].weight.data.shape[1]

    @property
    def out_dim(self):
        return self.layers[-1].weight.data.shape[0]

    def parameters(self):
        params = []
        for layer in self.layers:
            params.append(layer.weight)
            params.append(layer.bias)
        return params


def mlp_forward(net, x, tape=None):
    """Run ``net`` on a (batch, in_dim) matrix.

    With a tape, all layer parameters are watched and the pass is
    differentiable; without one it is a plain forward computation.
    """
    if tape is not None:
        for p in net.parameters():
            tape.watch(p)
    t = x if isinstance(x, Tensor) else Tensor(x)
    if t.data.ndim != 2:
        raise ShapeError("mlp_forward expects a 2-D input")
    if t.data.shape[1] != net.in_dim:
        raise ShapeError(
            f"input width {t.data.shape[1]} != expected {net.in_dim}")
    for layer in net.layers:
        t = add(matmul(t, transpose(layer.weight)), layer.bias)
        if layer.activation == "relu":
            t = relu(t)
    return t


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """Per-parameter first/second moment buffers plus the shared step count."""

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first_moment: list = field(default_factory=list)
    second_moment: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, learning_rate=1e-3, beta1=0.9, beta2=0.999,
                   eps=1e-8):
        state = cls(learning_rate=learning_rate, beta1=beta1, beta2=beta2,
                    eps=eps)
        state.first_moment = [np.zeros_like(p.data) for p in params]
        state.second_moment = [np.zeros_like(p.data) for p in params]
        return state


def adam_step(state, params, grads):
    """One Adam update with bias correction, applied in place.

    ``grads`` is either the mapping returned by :func:`backward` or a
    sequence aligned with ``params``.
    """
    if len(state.first_moment) != len(params):
        raise ShapeError("optimizer state does not match the parameter list")
    if isinstance(grads, dict):
        grad_list = [grads[p] for p in params]
    else:
        grad_list = list(grads)
        if len(grad_list) != len(params):
            raise ShapeError("gradient list does not match the parameter list")

    state.step += 1
    bias1 = 1.0 - state.beta1 ** state.step
    bias2 = 1.0 - state.beta2 ** state.step
    for p, m, v, g in zip(params, state.first_moment, state.second_moment,
                          grad_list):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.data.shape:
            raise ShapeError(
                f"gradient shape {g.shape} != parameter shape {p.data.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        m_hat = m / bias1
        v_hat = v / bias2
        p.data -= state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)
    return params, state


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------

def grad_check(loss_fn, params, eps=1e-6):
    """Compare tape gradients of ``loss_fn`` against central differences.

    ``loss_fn(tape)`` must rebuild the loss from scratch each call, routing
    every operation through the given tape (or running plain forward when
    the tape is None).  Returns the maximum relative error
    ``|analytic - fd| / max(1, |fd|)`` over all parameter entries.
    """
    tape = Tape()
    for p in params:
        tape.watch(p)
    loss = loss_fn(tape)
    if not np.isfinite(loss.data):
        raise NumericError("loss is not finite at the evaluation point")
    analytic = backward(tape, loss)

    worst = 0.0
    for p in params:
        a = analytic[p].reshape(-1)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + eps
            up = float(loss_fn(None).data)
            flat[i] = saved - eps
            down = float(loss_fn(None).data)
            flat[i] = saved
            fd = (up - down) / (2.0 * eps)
            err = abs(a[i] - fd) / max(1.0, abs(fd))
            if err > worst:
                worst = err
    return worst
