"""Differentiable layers: convolutions, pooling, batch norm, activations.

The functional primitives (``conv2d``, ``maxpool2d``, ...) build autodiff
nodes with hand-written backward passes. The module classes group
parameters with those primitives and fix the bias/BatchNorm convention:

* 3x3 convolutions: no bias, followed by BatchNorm and ReLU
* 2x2 transposed convolutions: no bias, no BatchNorm
* 1x1 output convolution: bias, no BatchNorm
* 5x5 communication convolutions: bias, BatchNorm and ReLU
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Parameter, Tensor, make_op

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


# ---------------------------------------------------------------------------
# layer specs and their closed-form parameter counts
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class ConvSpec:
    in_ch: int
    out_ch: int
    kernel: int = 3
    has_bias: bool = False

    def __post_init__(self):
        if self.in_ch <= 0 or self.out_ch <= 0:
            raise ValueError("channel counts must be positive")
        if self.kernel not in (1, 3, 5):
            raise ValueError(f"kernel must be 1, 3 or 5, got {self.kernel}")

    @property
    def padding(self) -> int:
        return (self.kernel - 1) // 2

    @property
    def param_count(self) -> int:
        return self.kernel**2 * self.in_ch * self.out_ch + (self.out_ch if self.has_bias else 0)


@dataclass(frozen=True)
class BatchNormSpec:
    channels: int
    eps: float = BN_EPS
    momentum: float = BN_MOMENTUM

    @property
    def param_count(self) -> int:
        return 2 * self.channels


# ---------------------------------------------------------------------------
# functional primitives
# ---------------------------------------------------------------------------
def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """(n, c, h, w) -> (n*h*w, c*k*k) patches for a stride-1 same-padded conv."""
    n, c, h, w = x.shape
    if k == 1:
        return x.transpose(0, 2, 3, 1).reshape(n * h * w, c)
    p = (k - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    cols = np.empty((n, h, w, c, k, k), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[..., i, j] = xp[:, :, i:i + h, j:j + w].transpose(0, 2, 3, 1)
    return cols.reshape(n * h * w, c * k * k)


def _col2im(dcols: np.ndarray, shape: tuple[int, int, int, int], k: int) -> np.ndarray:
    n, c, h, w = shape
    if k == 1:
        return dcols.reshape(n, h, w, c).transpose(0, 3, 1, 2)
    p = (k - 1) // 2
    d = dcols.reshape(n, h, w, c, k, k)
    dxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + h, j:j + w] += d[..., i, j].transpose(0, 3, 1, 2)
    return dxp[:, :, p:p + h, p:p + w]


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Stride-1 zero-padded cross-correlation; weight is (out, in, k, k)."""
    o, c, k, k2 = weight.shape
    if x.data.ndim != 4 or x.shape[1] != c:
        raise ValueError(f"conv2d expects {c} input channels, got shape {x.shape}")
    if k != k2 or k % 2 == 0:
        raise ValueError("conv2d needs an odd square kernel")
    n, _, h, w = x.shape
    cols = _im2col(x.data, k)
    w2 = weight.data.reshape(o, -1)
    out = cols @ w2.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, h, w, o).transpose(0, 3, 1, 2))

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gx = _col2im(g2 @ w2, x.shape, k) if x.requires_grad else None
        gw = (g2.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_op(out, parents, backward, "conv2d")


def conv_transpose2d(x: Tensor, weight: Tensor) -> Tensor:
    """2x2, stride-2 transposed convolution without bias; weight is (in, out, 2, 2)."""
    c, o, kh, kw = weight.shape
    if x.data.ndim != 4 or x.shape[1] != c:
        raise ValueError(f"conv_transpose2d expects {c} input channels, got shape {x.shape}")
    if (kh, kw) != (2, 2):
        raise ValueError("only 2x2 transposed convolutions are supported")
    n, _, h, w = x.shape
    x2 = x.data.transpose(0, 2, 3, 1).reshape(-1, c)
    w2 = weight.data.reshape(c, o * 4)
    out = (x2 @ w2).reshape(n, h, w, o, 2, 2).transpose(0, 3, 1, 4, 2, 5)
    out = np.ascontiguousarray(out).reshape(n, o, 2 * h, 2 * w)

    def backward(g):
        g2 = g.reshape(n, o, h, 2, w, 2).transpose(0, 2, 4, 1, 3, 5).reshape(-1, o * 4)
        gx = (g2 @ w2.T).reshape(n, h, w, c).transpose(0, 3, 1, 2) if x.requires_grad else None
        gw = (x2.T @ g2).reshape(weight.shape) if weight.requires_grad else None
        return gx, gw

    return make_op(out, (x, weight), backward, "conv_transpose2d")


def maxpool2d(x: Tensor) -> Tensor:
    """2x2 stride-2 max pooling; ties go to the first element in row-major window order."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2d needs even spatial dims, got {h}x{w}")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gw = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gx = gw.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return make_op(out, (x,), backward, "maxpool2d")


def batchnorm2d_train(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = BN_EPS):
    """Normalize with per-channel batch statistics over (n, h, w).

    Returns the output and the (mean, unbiased variance) pair used for the
    running-statistics update.
    """
    n, c, h, w = x.shape
    m = n * h * w
    if m <= 1:
        raise ValueError("batch norm in training mode needs more than one value per channel")
    mean = x.data.mean(axis=(0, 2, 3))
    var = x.data.var(axis=(0, 2, 3))
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def backward(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * gamma.data[None, :, None, None]
        dx = (
            inv_std[None, :, None, None] / m
            * (m * dxhat - dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
               - xhat * (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None])
        )
        return dx, dgamma, dbeta

    stats = (mean, var * (m / (m - 1)))
    return make_op(out.astype(x.dtype, copy=False), (x, gamma, beta), backward, "batchnorm2d"), stats


def batchnorm2d_eval(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
                     running_var: np.ndarray, eps: float = BN_EPS) -> Tensor:
    inv_std = 1.0 / np.sqrt(running_var + eps)
    xhat = (x.data - running_mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def backward(g):
        dx = g * (gamma.data * inv_std)[None, :, None, None]
        return dx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return make_op(out.astype(x.dtype, copy=False), (x, gamma, beta), backward, "batchnorm2d")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_op(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def apply_mask(x: Tensor, mask: np.ndarray) -> Tensor:
    """Multiply by a fixed (non-differentiable) mask."""
    mask = mask.astype(x.dtype, copy=False)
    return make_op(x.data * mask, (x,), lambda g: (g * mask,), "mask")


def dropout_mask(shape, p: float, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    if not 0 <= p < 1:
        raise ValueError("dropout rate must be in [0, 1)")
    keep = rng.random(shape) >= p
    return keep.astype(dtype) / dtype(1 - p)


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity in eval mode or when ``p == 0``."""
    if not training or p == 0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    return apply_mask(x, dropout_mask(x.shape, p, rng, x.dtype.type))


def softmax_channels(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return make_op(s, (x,), backward, "softmax")


def he_init(param: Parameter, fan_in: int, rng: np.random.Generator) -> None:
    """Fill ``param`` with N(0, 2 / fan_in) draws."""
    if fan_in <= 0:
        raise ValueError("fan_in must be positive")
    std = math.sqrt(2.0 / fan_in)
    param.data[...] = rng.normal(0.0, std, size=param.shape)


# ---------------------------------------------------------------------------
# forward context
# ---------------------------------------------------------------------------
@dataclass
class Context:
    """Per-invocation state: mode, dropout rng, deferred BatchNorm updates.

    BatchNorm layers never touch their running statistics during a forward
    pass; they record the batch statistics here and :meth:`commit` applies
    them in recording order. This keeps parallel clone passes free of
    parameter writes.
    """

    training: bool = False
    rng: np.random.Generator | None = None
    bn_updates: list = field(default_factory=list)
    seed: tuple[int, ...] | None = None

    def fork(self, key: int) -> "Context":
        """Child context with its own rng stream derived from ``(seed, key)``."""
        seed = None if self.seed is None else (*self.seed, key)
        rng = None if seed is None else np.random.default_rng(list(seed))
        return Context(training=self.training, rng=rng, seed=seed)

    def commit(self) -> None:
        for bn, mean, var in self.bn_updates:
            bn.update_running(mean, var)
        self.bn_updates.clear()


# ---------------------------------------------------------------------------
# modules
# ---------------------------------------------------------------------------
class Module:
    """Minimal container with a canonical parameter/buffer order."""

    def children(self) -> list[tuple[str, "Module"]]:
        return []

    def local_params(self) -> list[tuple[str, Parameter]]:
        return []

    def local_buffers(self) -> list[str]:
        return []

    def named_parameters(self, prefix: str = ""):
        for name, p in self.local_params():
            yield prefix + name, p
        for cname, child in self.children():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_state(self, prefix: str = ""):
        """(path, owner, attribute) for every stored array, params then buffers."""
        for name, _ in self.local_params():
            yield prefix + name, self, name
        for name in self.local_buffers():
            yield prefix + name, self, name
        for cname, child in self.children():
            yield from child.named_state(f"{prefix}{cname}.")

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def assign_paths(self, prefix: str = "") -> None:
        for path, p in self.named_parameters(prefix):
            p.path = path

    def astype(self, dtype) -> "Module":
        for _, owner, attr in self.named_state():
            value = getattr(owner, attr)
            if isinstance(value, Parameter):
                value.data = value.data.astype(dtype)
                value.grad = np.zeros_like(value.data)
            else:
                setattr(owner, attr, value.astype(dtype))
        return self

    def zero_grads(self) -> None:
        for p in self.parameters():
            p.zero_grad()


class Conv2d(Module):
    def __init__(self, spec: ConvSpec):
        self.spec = spec
        self.weight = Parameter(np.zeros((spec.out_ch, spec.in_ch, spec.kernel, spec.kernel), np.float32))
        self.bias = Parameter(np.zeros(spec.out_ch, np.float32)) if spec.has_bias else None

    def local_params(self):
        out = [("weight", self.weight)]
        if self.bias is not None:
            out.append(("bias", self.bias))
        return out

    def init(self, rng: np.random.Generator) -> None:
        he_init(self.weight, self.spec.kernel**2 * self.spec.in_ch, rng)
        if self.bias is not None:
            self.bias.data[...] = 0

    def __call__(self, x: Tensor, ctx: Context | None = None) -> Tensor:
        return conv2d(x, self.weight, self.bias)


class ConvTranspose2d(Module):
    def __init__(self, in_ch: int, out_ch: int):
        self.in_ch, self.out_ch = in_ch, out_ch
        self.weight = Parameter(np.zeros((in_ch, out_ch, 2, 2), np.float32))

    @property
    def param_count(self) -> int:
        return 4 * self.in_ch * self.out_ch

    def local_params(self):
        return [("weight", self.weight)]

    def init(self, rng: np.random.Generator) -> None:
        # each output pixel sees exactly one input pixel per input channel
        he_init(self.weight, self.in_ch, rng)

    def __call__(self, x: Tensor, ctx: Context | None = None) -> Tensor:
        return conv_transpose2d(x, self.weight)


class BatchNorm2d(Module):
    def __init__(self, spec: BatchNormSpec):
        self.spec = spec
        c = spec.channels
        self.gamma = Parameter(np.ones(c, np.float32))
        self.beta = Parameter(np.zeros(c, np.float32))
        self.running_mean = np.zeros(c, np.float32)
        self.running_var = np.ones(c, np.float32)

    def local_params(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def local_buffers(self):
        return ["running_mean", "running_var"]

    def init(self, rng=None) -> None:
        self.gamma.data[...] = 1
        self.beta.data[...] = 0
        self.running_mean = np.zeros_like(self.running_mean)
        self.running_var = np.ones_like(self.running_var)

    def update_running(self, mean: np.ndarray, var: np.ndarray) -> None:
        mom = self.spec.momentum
        dt = self.running_mean.dtype
        self.running_mean = ((1 - mom) * self.running_mean + mom * mean).astype(dt)
        self.running_var = ((1 - mom) * self.running_var + mom * var).astype(dt)

    def __call__(self, x: Tensor, ctx: Context | None = None) -> Tensor:
        if x.shape[1] != self.spec.channels:
            raise ValueError(f"batch norm expects {self.spec.channels} channels, got {x.shape[1]}")
        if ctx is not None and ctx.training:
            out, (mean, var) = batchnorm2d_train(x, self.gamma, self.beta, self.spec.eps)
            ctx.bn_updates.append((self, mean, var))
            return out
        return batchnorm2d_eval(x, self.gamma, self.beta, self.running_mean, self.running_var, self.spec.eps)


class ConvBNReLU(Module):
    """conv -> BatchNorm -> ReLU."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int = 3, bias: bool = False):
        self.conv = Conv2d(ConvSpec(in_ch, out_ch, kernel, bias))
        self.bn = BatchNorm2d(BatchNormSpec(out_ch))

    def children(self):
        return [("conv", self.conv), ("bn", self.bn)]

    def init(self, rng) -> None:
        self.conv.init(rng)
        self.bn.init()

    def __call__(self, x: Tensor, ctx: Context | None = None) -> Tensor:
        return relu(self.bn(self.conv(x), ctx))


class DoubleConv(Module):
    """Two 3x3 conv+BN+ReLU units with one dropout at the end."""

    def __init__(self, in_ch: int, out_ch: int, dropout: float = 0.0):
        self.unit1 = ConvBNReLU(in_ch, out_ch)
        self.unit2 = ConvBNReLU(out_ch, out_ch)
        self.dropout = dropout

    def children(self):
        return [("unit1", self.unit1), ("unit2", self.unit2)]

    def init(self, rng) -> None:
        self.unit1.init(rng)
        self.unit2.init(rng)

    def __call__(self, x: Tensor, ctx: Context | None = None) -> Tensor:
        y = self.unit2(self.unit1(x, ctx), ctx)
        training = ctx is not None and ctx.training
        return dropout(y, self.dropout, training, ctx.rng if ctx is not None else None)
