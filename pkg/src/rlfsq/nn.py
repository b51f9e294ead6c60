"""Small float64 layer library with hand-written backward passes.

Activations are ``(batch, channels, time)``. Every layer caches what its
backward needs during ``forward``; ``backward(dy)`` accumulates parameter
gradients and returns the gradient with respect to the layer input. A layer
therefore supports one pending backward at a time.
"""
from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import erf

NORM_EPS = 1e-6
_SQRT2 = math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Parameter:
    __slots__ = ("value", "grad", "exp_avg", "exp_avg_sq", "frozen")

    def __init__(self, value):
        self.value = np.array(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.exp_avg = np.zeros_like(self.value)
        self.exp_avg_sq = np.zeros_like(self.value)
        self.frozen = False

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Parameter(shape={self.shape}, frozen={self.frozen})"


class Module:
    """Base class; parameters and submodules are discovered from attributes."""

    def named_parameters(self, prefix: str = "") -> dict[str, Parameter]:
        out: dict[str, Parameter] = {}
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Parameter):
                out[name] = val
            elif isinstance(val, Module):
                out.update(val.named_parameters(name + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{name}.{i}."))
        return out

    def parameters(self) -> list[Parameter]:
        return list(self.named_parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad[...] = 0.0

    def __call__(self, x):
        return self.forward(x)


def _outer(dy, x):
    """sum over batch and time of dy x^T: ``(B,O,T), (B,C,T) -> (O,C)``."""
    return np.tensordot(dy, x, axes=([0, 2], [0, 2]))


def _init(rng: np.random.Generator, shape, fan_in: int, gain: float = 1.0) -> np.ndarray:
    return rng.normal(0.0, gain / math.sqrt(fan_in), size=shape)


class Pointwise(Module):
    """Kernel-1 convolution, i.e. a linear map over channels at every step."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, gain: float = 1.0):
        self.weight = Parameter(_init(rng, (c_out, c_in), c_in, gain))
        self.bias = Parameter(np.zeros(c_out))

    def forward(self, x):
        if x.shape[1] != self.weight.shape[1]:
            raise ValueError(f"expected {self.weight.shape[1]} channels, got {x.shape[1]}")
        self._x = x
        return np.matmul(self.weight.value, x) + self.bias.value[:, None]

    def backward(self, dy):
        self.weight.grad += _outer(dy, self._x)
        self.bias.grad += dy.sum(axis=(0, 2))
        return np.matmul(self.weight.value.T, dy)


Linear = Pointwise


class DepthwiseConv(Module):
    """Per-channel convolution with zero 'same' padding (odd kernel)."""

    def __init__(self, channels: int, rng: np.random.Generator, kernel: int = 7):
        if kernel % 2 == 0:
            raise ValueError("kernel must be odd")
        self.kernel = kernel
        self.weight = Parameter(_init(rng, (channels, kernel), kernel))
        self.bias = Parameter(np.zeros(channels))

    def forward(self, x):
        if x.shape[1] != self.weight.shape[0]:
            raise ValueError("channel mismatch")
        p = self.kernel // 2
        xp = np.pad(x, ((0, 0), (0, 0), (p, p)))
        self._xp = xp
        t = x.shape[2]
        w = self.weight.value
        y = np.zeros_like(x)
        for j in range(self.kernel):
            y += w[None, :, j, None] * xp[:, :, j:j + t]
        return y + self.bias.value[:, None]

    def backward(self, dy):
        xp = self._xp
        t = dy.shape[2]
        w = self.weight.value
        dxp = np.zeros_like(xp)
        for j in range(self.kernel):
            self.weight.grad[:, j] += np.einsum("bct,bct->c", dy, xp[:, :, j:j + t])
            dxp[:, :, j:j + t] += w[None, :, j, None] * dy
        self.bias.grad += dy.sum(axis=(0, 2))
        p = self.kernel // 2
        return dxp[:, :, p:p + t]


class StridedConv(Module):
    """Dense kernel-2, stride-2 convolution; halves the time axis."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, gain: float = 1.0):
        self.weight = Parameter(_init(rng, (c_out, c_in, 2), 2 * c_in, gain))
        self.bias = Parameter(np.zeros(c_out))

    def forward(self, x):
        if x.shape[2] % 2:
            raise ValueError("stride-2 convolution needs an even length")
        self._x = x
        w = self.weight.value
        return (np.matmul(w[:, :, 0], x[:, :, 0::2])
                + np.matmul(w[:, :, 1], x[:, :, 1::2])
                + self.bias.value[:, None])

    def backward(self, dy):
        x = self._x
        w = self.weight.value
        self.weight.grad[:, :, 0] += _outer(dy, x[:, :, 0::2])
        self.weight.grad[:, :, 1] += _outer(dy, x[:, :, 1::2])
        self.bias.grad += dy.sum(axis=(0, 2))
        dx = np.empty_like(x)
        dx[:, :, 0::2] = np.matmul(w[:, :, 0].T, dy)
        dx[:, :, 1::2] = np.matmul(w[:, :, 1].T, dy)
        return dx


class TransposedConv(Module):
    """Kernel-2, stride-2 transposed convolution; doubles the time axis."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, gain: float = 1.0):
        self.weight = Parameter(_init(rng, (c_out, c_in, 2), c_in, gain))
        self.bias = Parameter(np.zeros(c_out))

    def forward(self, x):
        self._x = x
        w = self.weight.value
        b, _, t = x.shape
        y = np.empty((b, w.shape[0], 2 * t))
        y[:, :, 0::2] = np.matmul(w[:, :, 0], x)
        y[:, :, 1::2] = np.matmul(w[:, :, 1], x)
        return y + self.bias.value[:, None]

    def backward(self, dy):
        x = self._x
        w = self.weight.value
        self.weight.grad[:, :, 0] += _outer(dy[:, :, 0::2], x)
        self.weight.grad[:, :, 1] += _outer(dy[:, :, 1::2], x)
        self.bias.grad += dy.sum(axis=(0, 2))
        return (np.matmul(w[:, :, 0].T, dy[:, :, 0::2])
                + np.matmul(w[:, :, 1].T, dy[:, :, 1::2]))


class GELU(Module):
    """Exact (erf) GELU."""

    def forward(self, x):
        self._x = x
        return 0.5 * x * (1.0 + erf(x / _SQRT2))

    def backward(self, dy):
        x = self._x
        cdf = 0.5 * (1.0 + erf(x / _SQRT2))
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        return dy * (cdf + x * pdf)


class Sigmoid(Module):
    def forward(self, x):
        self._y = 0.5 * (1.0 + np.tanh(0.5 * x))
        return self._y

    def backward(self, dy):
        return dy * self._y * (1.0 - self._y)


class LayerNorm(Module):
    """Normalizes over the channel axis at each time step."""

    def __init__(self, channels: int):
        self.weight = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))

    def forward(self, x):
        mu = x.mean(axis=1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=1, keepdims=True)
        rstd = 1.0 / np.sqrt(var + NORM_EPS)
        xhat = xc * rstd
        self._xhat, self._rstd = xhat, rstd
        return self.weight.value[:, None] * xhat + self.bias.value[:, None]

    def backward(self, dy):
        xhat, rstd = self._xhat, self._rstd
        self.weight.grad += np.einsum("bct,bct->c", dy, xhat)
        self.bias.grad += dy.sum(axis=(0, 2))
        g = dy * self.weight.value[:, None]
        return rstd * (g - g.mean(axis=1, keepdims=True)
                       - xhat * (g * xhat).mean(axis=1, keepdims=True))


class GRN(Module):
    """Global response normalization over time, with identity residual.

    ``y = gamma * x * n + beta + x`` where ``n_c = G_c / (mean_c G + eps)`` and
    ``G_c`` is the L2 norm of channel ``c`` over time.
    """

    def __init__(self, channels: int):
        self.gamma = Parameter(np.zeros(channels))
        self.beta = Parameter(np.zeros(channels))

    def forward(self, x):
        gx = np.sqrt((x * x).sum(axis=2, keepdims=True) + NORM_EPS ** 2)
        denom = gx.mean(axis=1, keepdims=True) + NORM_EPS
        nx = gx / denom
        self._x, self._gx, self._denom, self._nx = x, gx, denom, nx
        gamma = self.gamma.value[:, None]
        return gamma * x * nx + self.beta.value[:, None] + x

    def backward(self, dy):
        x, gx, denom, nx = self._x, self._gx, self._denom, self._nx
        gamma = self.gamma.value[:, None]
        self.gamma.grad += np.einsum("bct,bct->c", dy, x * nx)
        self.beta.grad += dy.sum(axis=(0, 2))
        dnx = (dy * gamma * x).sum(axis=2, keepdims=True)  # (B, C, 1)
        c = x.shape[1]
        dgx = dnx / denom - (dnx * gx).sum(axis=1, keepdims=True) / (denom ** 2 * c)
        return dy * (gamma * nx + 1.0) + dgx * x / gx


class AvgPool2(Module):
    def forward(self, x):
        if x.shape[2] % 2:
            raise ValueError("average pooling needs an even length")
        return 0.5 * (x[:, :, 0::2] + x[:, :, 1::2])

    def backward(self, dy):
        return np.repeat(0.5 * dy, 2, axis=2)


class NearestUpsample2(Module):
    def forward(self, x):
        return np.repeat(x, 2, axis=2)

    def backward(self, dy):
        return dy[:, :, 0::2] + dy[:, :, 1::2]


class ChannelRepeat(Module):
    """Doubles the width by concatenating the input with itself."""

    def forward(self, x):
        return np.concatenate([x, x], axis=1)

    def backward(self, dy):
        c = dy.shape[1] // 2
        return dy[:, :c] + dy[:, c:]


class ChannelHalfMean(Module):
    """Halves the width by averaging channel ``c`` with channel ``c + C/2``."""

    def forward(self, x):
        c = x.shape[1]
        if c % 2:
            raise ValueError("need an even channel count")
        return 0.5 * (x[:, : c // 2] + x[:, c // 2:])

    def backward(self, dy):
        return np.concatenate([0.5 * dy, 0.5 * dy], axis=1)


def add(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a + b


class AdamW:
    """Decoupled weight decay Adam with bias correction.

    Frozen parameters are skipped entirely (values and moments untouched).
    Gradients of every parameter are cleared after each step.
    """

    def __init__(self, params, lr: float = 1e-3, betas=(0.8, 0.9), eps: float = 1e-8,
                 weight_decay: float = 1e-2):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for p in self.params:
            if not p.frozen:
                g = p.grad
                p.value *= 1.0 - lr * self.weight_decay
                p.exp_avg *= self.beta1
                p.exp_avg += (1.0 - self.beta1) * g
                p.exp_avg_sq *= self.beta2
                p.exp_avg_sq += (1.0 - self.beta2) * g * g
                p.value -= lr * (p.exp_avg / c1) / (np.sqrt(p.exp_avg_sq / c2) + self.eps)
            p.grad[...] = 0.0


@dataclass(frozen=True)
class ScheduleConfig:
    total_steps: int
    peak_lr: float
    floor_lr: float = 0.0
    warmup_fraction: float = 0.05

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError("total_steps must be positive")
        if not 0 < self.warmup_fraction < 1:
            raise ValueError("warmup_fraction must be in (0, 1)")
        if not 0 <= self.floor_lr <= self.peak_lr:
            raise ValueError("need 0 <= floor_lr <= peak_lr")


def one_cycle_lr(step: int, cfg: ScheduleConfig) -> float:
    """Cosine ramp floor->peak over the warmup, then cosine decay peak->floor."""
    if not 0 <= step <= cfg.total_steps:
        raise ValueError(f"step {step} outside 0..{cfg.total_steps}")
    warm = cfg.warmup_fraction * cfg.total_steps
    span = cfg.peak_lr - cfg.floor_lr
    if step <= warm:
        return cfg.floor_lr + span * 0.5 * (1.0 - math.cos(math.pi * step / warm))
    frac = (step - warm) / (cfg.total_steps - warm)
    return cfg.floor_lr + span * 0.5 * (1.0 + math.cos(math.pi * frac))


def param_hash(params) -> str:
    """SHA-256 over parameter names and raw value bytes."""
    h = hashlib.sha256()
    items = params.items() if isinstance(params, dict) else enumerate(params)
    for name, p in items:
        arr = p.value if isinstance(p, Parameter) else np.asarray(p)
        h.update(str(name).encode())
        h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return h.hexdigest()


# -- checkpoints --------------------------------------------------------------

CKPT_MAGIC = b"CLCK"


def _write_section(fh, arrays: dict[str, np.ndarray]) -> None:
    fh.write(CKPT_MAGIC + struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        fh.write(struct.pack("<I", len(raw)) + raw)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(np.ascontiguousarray(arr).tobytes())


def _read_section(buf: memoryview, pos: int) -> tuple[dict[str, np.ndarray], int]:
    if bytes(buf[pos:pos + 4]) != CKPT_MAGIC:
        raise ValueError("bad checkpoint magic")
    (count,) = struct.unpack_from("<I", buf, pos + 4)
    pos += 8
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", buf, pos)
        name = bytes(buf[pos + 4:pos + 4 + n]).decode("utf-8")
        pos += 4 + n
        (rank,) = struct.unpack_from("<I", buf, pos)
        dims = struct.unpack_from(f"<{rank}I", buf, pos + 4)
        pos += 4 + 4 * rank
        size = int(np.prod(dims, dtype=np.int64))
        if pos + 8 * size > len(buf):
            raise ValueError("truncated checkpoint")
        out[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(dims).copy()
        pos += 8 * size
    return out, pos


def save_checkpoint(path, params: dict[str, Parameter], optimizer: AdamW | None = None) -> None:
    """Parameter section, then an optimizer section in the same layout."""
    opt: dict[str, np.ndarray] = {}
    if optimizer is not None:
        opt["step"] = np.array(float(optimizer.step_count))
        for name, p in params.items():
            opt[f"{name}.exp_avg"] = p.exp_avg
            opt[f"{name}.exp_avg_sq"] = p.exp_avg_sq
    with open(path, "wb") as fh:
        _write_section(fh, {k: p.value for k, p in params.items()})
        _write_section(fh, opt)


def load_checkpoint(path, params: dict[str, Parameter], optimizer: AdamW | None = None) -> None:
    """Load values (and optimizer moments, if present) into ``params`` in place."""
    buf = memoryview(Path(path).read_bytes())
    values, pos = _read_section(buf, 0)
    opt, _ = _read_section(buf, pos) if pos < len(buf) else ({}, pos)
    missing = set(params) - set(values)
    if missing:
        raise ValueError(f"checkpoint lacks parameters: {sorted(missing)[:3]}")
    for name, p in params.items():
        if values[name].shape != p.shape:
            raise ValueError(f"{name}: shape {values[name].shape} != {p.shape}")
        p.value[...] = values[name]
        if f"{name}.exp_avg" in opt:
            p.exp_avg[...] = opt[f"{name}.exp_avg"]
            p.exp_avg_sq[...] = opt[f"{name}.exp_avg_sq"]
    if optimizer is not None and "step" in opt:
        optimizer.step_count = int(opt["step"])


# -- gradient checking ----------------------------------------------------------

def numerical_grad(f, arr: np.ndarray, h: float = 1e-4, index=None) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``arr`` (perturbed in place).

    ``index`` restricts the check to a list of flat positions; other entries
    of the result are NaN.
    """
    flat = arr.reshape(-1)
    out = np.full(flat.shape, np.nan)
    positions = range(flat.size) if index is None else index
    for i in positions:
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * h)
    return out.reshape(arr.shape)


def grad_error(analytic, numeric, floor: float = 1e-6) -> float:
    """Largest relative error, with ``floor`` as the minimum denominator.

    Entries where ``numeric`` is NaN (unchecked) are ignored.
    """
    a = np.asarray(analytic).ravel()
    n = np.asarray(numeric).ravel()
    mask = ~np.isnan(n)
    if not mask.any():
        return 0.0
    a, n = a[mask], n[mask]
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))
