"""Dense float64 tensors with reverse-mode gradients.

Every op records a closure mapping the output gradient to one gradient per
parent. ``backward`` walks the recorded graph once in reverse topological
order and accumulates into ``Parameter.grad`` (+=, never overwritten).
Graphs are built only while gradients are enabled and at least one operand
is a Parameter or a tracked intermediate.
"""
import contextlib
import hashlib
import logging
import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit, softmax

from errors import ContractError, DimensionError, NumericError

logger = logging.getLogger(__name__)

DEBUG = os.environ.get("SERST_DEBUG", "").lower() in ("1", "true", "yes")
_GRAD_ENABLED = True


def set_debug(flag):
    """Toggle NaN/Inf assertions on tensor creation."""
    global DEBUG
    DEBUG = bool(flag)


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording a graph (frozen-weight inference)."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


# ======================================
# TENSOR / PARAMETER
# ======================================

class Tensor:
    """Immutable row-major float64 array plus its place in the graph."""

    __array_ufunc__ = None  # ndarray (op) Tensor defers to the Tensor side

    def __init__(self, data, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        if DEBUG and not np.all(np.isfinite(self.data)):
            raise NumericError(f"non-finite values in tensor of shape {self.data.shape}")
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data.copy()

    def item(self):
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self):
        return transpose(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


class Parameter(Tensor):
    """Trainable leaf. ``grad`` always has the shape of ``data``."""

    def __init__(self, data):
        super().__init__(np.array(data, dtype=np.float64))
        self.grad = np.zeros_like(self.data)

    @property
    def value(self):
        return self.data

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter(shape={self.shape})"


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _tracked(t):
    return isinstance(t, Parameter) or t._backward is not None


def _node(data, parents, backward):
    if _GRAD_ENABLED and any(_tracked(p) for p in parents):
        return Tensor(data, parents, backward)
    return Tensor(data)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ======================================
# ELEMENTWISE OPS
# ======================================

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data / b.data, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def neg(a):
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (g * 0.5 / out,))


def square(a):
    a = as_tensor(a)
    return _node(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def sigmoid(a):
    a = as_tensor(a)
    s = expit(a.data)
    return _node(s, (a,), lambda g: (g * s * (1.0 - s),))


def silu(a):
    """x * sigmoid(x)."""
    a = as_tensor(a)
    s = expit(a.data)
    return _node(a.data * s, (a,), lambda g: (g * (s + a.data * s * (1.0 - s)),))


def softplus(a):
    a = as_tensor(a)
    return _node(np.logaddexp(0.0, a.data), (a,), lambda g: (g * expit(a.data),))


# ======================================
# SHAPE OPS
# ======================================

def reshape(a, shape):
    a = as_tensor(a)
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def getitem(a, idx):
    a = as_tensor(a)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _node(a.data[idx], (a,), backward)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                 lambda g: tuple(np.split(g, cuts, axis=axis)))


def stack(tensors, axis=0):
    expanded = []
    for t in tensors:
        t = as_tensor(t)
        shape = list(t.shape)
        shape.insert(axis, 1)
        expanded.append(reshape(t, tuple(shape)))
    return concat(expanded, axis=axis)


# ======================================
# REDUCTIONS
# ======================================

def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# ======================================
# LINEAR ALGEBRA / NN OPS
# ======================================

def matmul(a, b):
    """Matrix product of two 2-D tensors."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return _node(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def softmax_rows(x):
    """Softmax over the last axis, stabilised by the row max."""
    x = as_tensor(x)
    y = softmax(x.data, axis=-1)
    return _node(y, (x,), lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))


def layer_norm(x, gamma=None, beta=None, eps=1e-5):
    """Normalise over the last axis, then apply the optional affine."""
    if eps <= 0:
        raise ContractError(f"layer_norm: eps must be positive, got {eps}")
    x = as_tensor(x)
    d = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv
    out = xhat
    gamma = None if gamma is None else as_tensor(gamma)
    beta = None if beta is None else as_tensor(beta)
    if gamma is not None:
        out = out * gamma.data
    if beta is not None:
        out = out + beta.data
    parents = tuple(t for t in (x, gamma, beta) if t is not None)

    def backward(g):
        dxhat = g * gamma.data if gamma is not None else g
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        grads = [dx]
        if gamma is not None:
            grads.append((g * xhat).reshape(-1, d).sum(axis=0))
        if beta is not None:
            grads.append(g.reshape(-1, d).sum(axis=0))
        return tuple(grads)

    return _node(out, parents, backward)


def _check_conv_operands(x, w, name, in_axis):
    if x.ndim != 3 or w.ndim != 4:
        raise DimensionError(f"{name}: expected x[c,H,W] and 4-D kernel, got {x.shape} and {w.shape}")
    if w.shape[in_axis] != x.shape[0]:
        raise DimensionError(f"{name}: input channels {x.shape[0]} do not match kernel {w.shape}")


def conv2d(x, w, b=None, stride=1, padding=0):
    """Cross-correlation of x[c_in,H,W] with w[c_out,c_in,kh,kw], zero padding."""
    x, w = as_tensor(x), as_tensor(w)
    _check_conv_operands(x, w, "conv2d", 1)
    c_out, c_in, kh, kw = w.shape
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
    hp, wp = xp.shape[1:]
    if kh > hp or kw > wp:
        raise DimensionError(f"conv2d: kernel {(kh, kw)} larger than padded input {(hp, wp)}")
    windows = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    h_out, w_out = windows.shape[1:3]
    cols = windows.transpose(1, 2, 0, 3, 4).reshape(h_out * w_out, c_in * kh * kw)
    wmat = w.data.reshape(c_out, -1)
    out = (cols @ wmat.T).T.reshape(c_out, h_out, w_out)
    b = None if b is None else as_tensor(b)
    if b is not None:
        out = out + b.data[:, None, None]
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        gmat = g.reshape(c_out, -1).T
        dw = (gmat.T @ cols).reshape(w.shape)
        dcols = (gmat @ wmat).reshape(h_out, w_out, c_in, kh, kw)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, i:i + stride * h_out:stride, j:j + stride * w_out:stride] += \
                    dcols[:, :, :, i, j].transpose(2, 0, 1)
        dx = dxp[:, padding:hp - padding, padding:wp - padding]
        if b is None:
            return dx, dw
        return dx, dw, g.sum(axis=(1, 2))

    return _node(out, parents, backward)


def conv_transpose2d(x, w, b=None, stride=1, padding=0):
    """Transposed convolution of x[c_in,H,W] with w[c_in,c_out,kh,kw].

    Output size is (H-1)*stride - 2*padding + kh along each spatial axis.
    """
    x, w = as_tensor(x), as_tensor(w)
    _check_conv_operands(x, w, "conv_transpose2d", 0)
    c_in, c_out, kh, kw = w.shape
    h, wd = x.shape[1:]
    full_h, full_w = (h - 1) * stride + kh, (wd - 1) * stride + kw
    h_out, w_out = full_h - 2 * padding, full_w - 2 * padding
    if h_out < 1 or w_out < 1:
        raise DimensionError(f"conv_transpose2d: padding {padding} leaves no output for {x.shape}")
    xmat = x.data.reshape(c_in, h * wd)
    wmat = w.data.reshape(c_in, -1)
    cols = (xmat.T @ wmat).reshape(h, wd, c_out, kh, kw)
    full = np.zeros((c_out, full_h, full_w))
    for i in range(kh):
        for j in range(kw):
            full[:, i:i + stride * h:stride, j:j + stride * wd:stride] += cols[:, :, :, i, j].transpose(2, 0, 1)
    out = full[:, padding:padding + h_out, padding:padding + w_out]
    b = None if b is None else as_tensor(b)
    if b is not None:
        out = out + b.data[:, None, None]
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        gfull = np.zeros((c_out, full_h, full_w))
        gfull[:, padding:padding + h_out, padding:padding + w_out] = g
        gcols = np.empty((h, wd, c_out, kh, kw))
        for i in range(kh):
            for j in range(kw):
                gcols[:, :, :, i, j] = gfull[:, i:i + stride * h:stride, j:j + stride * wd:stride].transpose(1, 2, 0)
        gcols = gcols.reshape(h * wd, -1)
        dx = (gcols @ wmat.T).T.reshape(x.shape)
        dw = (xmat @ gcols).reshape(w.shape)
        if b is None:
            return dx, dw
        return dx, dw, g.sum(axis=(1, 2))

    return _node(out, parents, backward)


def mse_loss(pred, target):
    """Mean of squared differences."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"mse_loss: prediction {pred.shape} vs target {target.shape}")
    diff = pred.data - target.data
    n = diff.size

    def backward(g):
        d = g * 2.0 * diff / n
        return d, -d

    return _node(np.array((diff * diff).mean()), (pred, target), backward)


# ======================================
# BACKWARD PASS
# ======================================

def _topological_order(root):
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for parent in node._parents:
            if _tracked(parent) and id(parent) not in seen:
                stack_.append((parent, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(param) into every reachable Parameter.grad."""
    if loss.data.size != 1:
        raise ContractError(f"backward: root must be scalar, got shape {loss.shape}")
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if isinstance(node, Parameter):
            node.grad += g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not _tracked(parent):
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


# ======================================
# SEEDED RANDOMNESS
# ======================================

def derive_seed(seed, purpose):
    """Child seed = hash(parent seed, purpose); stable across platforms."""
    digest = hashlib.sha256(f"{int(seed)}/{purpose}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


class SeededRng:
    """PCG64 stream; the same seed yields the same draws everywhere."""

    def __init__(self, seed):
        self.seed = int(seed) % (1 << 64)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def normal(self, shape):
        return self._gen.standard_normal(shape)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def random(self):
        return float(self._gen.random())

    def integers(self, high, low=0):
        return int(self._gen.integers(low, high))

    def child(self, purpose):
        return SeededRng(derive_seed(self.seed, purpose))

    def __repr__(self):
        return f"SeededRng(seed={self.seed})"


# ======================================
# GRADIENT CHECKING
# ======================================

def relative_error(analytic, numeric, floor=1e-6):
    """Norm-relative difference between two gradient arrays."""
    diff = np.linalg.norm(np.ravel(analytic) - np.ravel(numeric))
    scale = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), floor)
    return float(diff / scale)


def numerical_gradient(fn, param, h=1e-5):
    """Central differences of scalar ``fn()`` with respect to ``param``."""
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + h
            plus = fn().item()
            flat[i] = saved - h
            minus = fn().item()
            flat[i] = saved
            grad.reshape(-1)[i] = (plus - minus) / (2.0 * h)
    return grad


def gradient_check(fn, params, h=1e-5):
    """Compare backward() against central differences for each named parameter.

    ``params`` maps names to Parameters. Returns name -> relative error.
    """
    for p in params.values():
        p.zero_grad()
    backward(fn())
    errors = {}
    for name, p in params.items():
        analytic = p.grad.copy()
        errors[name] = relative_error(analytic, numerical_gradient(fn, p, h))
    return errors
