"""Parameter containers and the handful of layers the models are built from."""
import logging

import numpy as np

import numerics as nx
from errors import ContractError
from numerics import Parameter

logger = logging.getLogger(__name__)


class Module:
    """Owns Parameters as attributes; sub-modules may be attributes or lists."""

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{full}.{i}", item

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def parameter_count(self):
        return sum(p.size for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise ContractError(f"state mismatch: missing {missing[:5]}, unexpected {unexpected[:5]}")
        for name, p in own.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ContractError(f"state '{name}': expected shape {p.shape}, got {value.shape}")
            p.data = value.copy()
            p.zero_grad()


def _scaled_normal(rng, shape, fan_in, zero):
    if zero:
        return np.zeros(shape)
    return rng.normal(shape) / np.sqrt(fan_in)


class Linear(Module):
    def __init__(self, n_in, n_out, rng, zero=False, bias=True):
        self.weight = Parameter(_scaled_normal(rng, (n_in, n_out), n_in, zero))
        self.bias = Parameter(np.zeros(n_out)) if bias else None

    def __call__(self, x):
        x = nx.as_tensor(x)
        flat = x.ndim == 1
        if flat:
            x = x.reshape(1, -1)
        out = x @ self.weight
        if self.bias is not None:
            out = out + self.bias
        return out.reshape(-1) if flat else out


class Conv2d(Module):
    def __init__(self, c_in, c_out, kernel, rng, stride=1, padding=0, zero=False):
        fan_in = c_in * kernel * kernel
        self.weight = Parameter(_scaled_normal(rng, (c_out, c_in, kernel, kernel), fan_in, zero))
        self.bias = Parameter(np.zeros(c_out))
        self.stride = stride
        self.padding = padding

    def __call__(self, x):
        return nx.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class ConvTranspose2d(Module):
    def __init__(self, c_in, c_out, kernel, rng, stride=1, padding=0):
        fan_in = c_in * kernel * kernel // max(stride * stride, 1)
        self.weight = Parameter(_scaled_normal(rng, (c_in, c_out, kernel, kernel), fan_in, False))
        self.bias = Parameter(np.zeros(c_out))
        self.stride = stride
        self.padding = padding

    def __call__(self, x):
        return nx.conv_transpose2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        self.gamma = Parameter(np.ones(dim))
        self.beta = Parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x):
        return nx.layer_norm(x, self.gamma, self.beta, self.eps)


def channel_layer_norm(x, eps=1e-5):
    """Affine-free layer norm over the channel axis of x[c,H,W]."""
    c, h, w = x.shape
    rows = nx.transpose(x.reshape(c, h * w))
    normed = nx.layer_norm(rows, eps=eps)
    return nx.transpose(normed).reshape(c, h, w)


# ======================================
# OPTIMISER
# ======================================

class GradientDescent:
    """Fixed-step gradient descent, optional heavy-ball momentum and norm clipping."""

    def __init__(self, params, lr, momentum=0.0, clip_norm=None):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.clip_norm = clip_norm
        self._velocity = [np.zeros_like(p.data) for p in self.params]

    def grad_norm(self):
        return float(np.sqrt(sum(float((p.grad * p.grad).sum()) for p in self.params)))

    def step(self):
        scale = 1.0
        if self.clip_norm:
            norm = self.grad_norm()
            if norm > self.clip_norm:
                scale = self.clip_norm / norm
        for p, v in zip(self.params, self._velocity):
            v *= self.momentum
            v += scale * p.grad
            p.data = p.data - self.lr * v

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()
