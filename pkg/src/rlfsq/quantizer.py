"""Residual sigmoid-bounded FSQ, deterministic and as a stochastic policy.

All functions broadcast over leading axes; the last axis is the latent
dimension (4) or, for logits, the level axis (8).

Stochastic mode samples each (layer, dim) level independently from
``softmax(-(b - g_k)**2 / tau)`` via the Gumbel-max trick. Log-probabilities
are taken from the same softmax without noise.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, log_softmax, softmax

LEVELS = (8, 8, 8, 8)
# Distances closer than this count as ties and resolve to the lower index.
TIE_TOL = 1e-12


@dataclass(frozen=True)
class FsqGrid:
    levels: tuple[int, ...] = LEVELS
    lo: float = 0.0
    hi: float = 1.0
    points: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(set(self.levels)) != 1:
            raise ValueError("all dims must share one level count")
        if not self.hi > self.lo:
            raise ValueError("empty grid range")
        n = self.levels[0]
        pts = self.lo + (self.hi - self.lo) * np.arange(n) / (n - 1)
        pts[-1] = self.hi
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)

    @property
    def dims(self) -> int:
        return len(self.levels)

    @property
    def n_levels(self) -> int:
        return self.levels[0]

    @property
    def spacing(self) -> float:
        return (self.hi - self.lo) / (self.n_levels - 1)

    @property
    def bits(self) -> int:
        return int(sum(np.log2(self.levels)))


LAYER1 = FsqGrid(LEVELS, 0.0, 1.0)
LAYER2 = FsqGrid(LEVELS, -LAYER1.spacing / 2, LAYER1.spacing / 2)


def bound(z):
    """Logistic sigmoid, elementwise."""
    return expit(np.asarray(z, dtype=np.float64))


def policy_logits(b, grid: FsqGrid) -> np.ndarray:
    """Negative squared distance from each value to each grid level: ``(..., 8)``."""
    b = np.asarray(b, dtype=np.float64)
    return -((b[..., None] - grid.points) ** 2)


def _argmax_low(scores: np.ndarray) -> np.ndarray:
    best = scores.max(axis=-1, keepdims=True)
    return np.argmax(scores >= best - TIE_TOL, axis=-1)


def nearest_index(b, grid: FsqGrid) -> np.ndarray:
    """Index of the closest grid level per element; near-ties go to the lower index."""
    return _argmax_low(policy_logits(b, grid))


def dequantize(idx, grid: FsqGrid) -> np.ndarray:
    idx = np.asarray(idx)
    if np.any(idx < 0) or np.any(idx >= grid.n_levels):
        raise IndexError(f"level index outside 0..{grid.n_levels - 1}")
    return grid.points[idx]


def sample_index(logits, tau: float, rng: np.random.Generator | None) -> np.ndarray:
    """Gumbel-max sample from ``softmax(logits / tau)`` along the last axis.

    ``rng=None`` disables the noise and returns the (tie-broken) argmax,
    which for quantizer logits is exactly :func:`nearest_index`.
    """
    if not tau > 0:
        raise ValueError("temperature must be positive")
    logits = np.asarray(logits, dtype=np.float64)
    if rng is None:
        return _argmax_low(logits)
    return np.argmax(logits / tau + rng.gumbel(size=logits.shape), axis=-1)


def log_probs(logits, tau: float) -> np.ndarray:
    if not tau > 0:
        raise ValueError("temperature must be positive")
    return log_softmax(np.asarray(logits, dtype=np.float64) / tau, axis=-1)


def probs(logits, tau: float) -> np.ndarray:
    if not tau > 0:
        raise ValueError("temperature must be positive")
    return softmax(np.asarray(logits, dtype=np.float64) / tau, axis=-1)


def log_prob(idx, logits, tau: float) -> np.ndarray:
    """Noise-free log-probability of the chosen level(s)."""
    logits = np.asarray(logits, dtype=np.float64)
    idx = np.asarray(idx)
    if np.any(idx < 0) or np.any(idx >= logits.shape[-1]):
        raise IndexError("level index out of range")
    lp = log_probs(logits, tau)
    return np.take_along_axis(lp, idx[..., None], axis=-1)[..., 0]


def indices_to_code(idx, levels=LEVELS) -> np.ndarray:
    """Mixed-radix pack of per-dim indices, dim 0 least significant."""
    idx = np.asarray(idx, dtype=np.int64)
    radix = np.cumprod((1,) + tuple(levels[:-1]))
    if np.any(idx < 0) or np.any(idx >= np.asarray(levels)):
        raise ValueError("level index out of range")
    return (idx * radix).sum(axis=-1)


def code_to_indices(code, levels=LEVELS) -> np.ndarray:
    code = np.asarray(code, dtype=np.int64)
    size = int(np.prod(levels))
    if np.any(code < 0) or np.any(code >= size):
        raise ValueError(f"code outside 0..{size - 1}")
    out = []
    for n in levels:
        out.append(code % n)
        code = code // n
    return np.stack(out, axis=-1)


@dataclass
class QuantizeResult:
    bounded: np.ndarray  # sigmoid(z)
    idx1: np.ndarray
    idx2: np.ndarray
    value: np.ndarray  # dequantized layer1 + layer2

    @property
    def codes(self) -> np.ndarray:
        """``(..., 2)`` integer codes, layer 1 first."""
        return np.stack([indices_to_code(self.idx1), indices_to_code(self.idx2)], axis=-1)


@dataclass(frozen=True)
class ResidualQuantizer:
    """Two-layer residual FSQ over sigmoid-bounded latents."""

    layer1: FsqGrid = LAYER1
    layer2: FsqGrid = LAYER2

    def __post_init__(self):
        if self.layer1.dims != self.layer2.dims:
            raise ValueError("layers must share the latent dimension")

    @property
    def dims(self) -> int:
        return self.layer1.dims

    @property
    def bits_per_layer(self) -> int:
        return self.layer1.bits

    @property
    def bits_per_frame(self) -> int:
        return self.layer1.bits + self.layer2.bits

    def quantize(self, z, tau: float = 1.0, rng: np.random.Generator | None = None) -> QuantizeResult:
        """Quantize raw latents; stochastic when ``rng`` is given."""
        b = bound(z)
        return self.quantize_bounded(b, tau, rng)

    def quantize_bounded(self, b, tau: float = 1.0, rng=None) -> QuantizeResult:
        b = np.asarray(b, dtype=np.float64)
        if rng is None:
            idx1 = nearest_index(b, self.layer1)
        else:
            idx1 = sample_index(policy_logits(b, self.layer1), tau, rng)
        r = b - dequantize(idx1, self.layer1)
        if rng is None:
            idx2 = nearest_index(r, self.layer2)
        else:
            idx2 = sample_index(policy_logits(r, self.layer2), tau, rng)
        value = dequantize(idx1, self.layer1) + dequantize(idx2, self.layer2)
        return QuantizeResult(b, idx1, idx2, value)

    def action_log_prob(self, b, idx1, idx2, tau: float) -> np.ndarray:
        """Per-(frame, dim) log-probability of both layer actions, summed over layers."""
        b = np.asarray(b, dtype=np.float64)
        r = b - dequantize(idx1, self.layer1)
        return (log_prob(idx1, policy_logits(b, self.layer1), tau)
                + log_prob(idx2, policy_logits(r, self.layer2), tau))

    def action_log_prob_grad(self, b, idx1, idx2, tau: float) -> np.ndarray:
        """d(action_log_prob)/db, elementwise.

        For logits ``-(x - g_k)**2 / tau`` the derivative of the chosen
        level's log-probability is ``2 (g_k - E[g]) / tau``. The layer-2
        residual depends on ``b`` with unit slope.
        """
        b = np.asarray(b, dtype=np.float64)
        g1 = self.layer1.points
        g2 = self.layer2.points
        p1 = probs(policy_logits(b, self.layer1), tau)
        r = b - g1[idx1]
        p2 = probs(policy_logits(r, self.layer2), tau)
        return (2.0 / tau) * ((g1[idx1] - p1 @ g1) + (g2[idx2] - p2 @ g2))

    def decode_codes(self, codes) -> np.ndarray:
        """Dequantized latent values from ``(..., 2)`` layer codes."""
        codes = np.asarray(codes)
        return (dequantize(code_to_indices(codes[..., 0]), self.layer1)
                + dequantize(code_to_indices(codes[..., 1]), self.layer2))
