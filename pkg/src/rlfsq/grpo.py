"""Group-relative advantages and the combined RL + mel-anchor objective.

The loss for one input with ``G`` sampled token sequences is::

    -w_rl * norm * sum_i A_i * sum_actions log pi(action)  +  w_mel * L1(recon, ref)

where ``norm`` is ``1/G`` (or 1 with ``normalize_by_group=False``) and the
advantages ``A_i`` are constants. Every sampled (frame, layer, dim) level is
one action.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dsp import mel_l1

STD_EPS = 1e-8
DEGENERATE_STD = 1e-12


@dataclass(frozen=True)
class Stage2LossWeights:
    rl: float = 10.0
    mel: float = 1.0
    normalize_by_group: bool = True

    def __post_init__(self):
        if self.rl < 0 or self.mel < 0:
            raise ValueError("loss weights must be nonnegative")


def advantages(rewards) -> np.ndarray:
    """``(R - mean) / (population std + 1e-8)``; all zeros when the rewards are all equal."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.size < 2:
        raise ValueError("need a group of at least two rewards")
    std = r.std()
    if std < DEGENERATE_STD:
        return np.zeros_like(r)
    return (r - r.mean()) / (std + STD_EPS)


@dataclass
class RolloutGroup:
    """``G`` samples for one input.

    ``idx1``/``idx2`` hold the sampled level indices, shape ``(G, T', 4)``;
    ``log_probs`` is the per-member sum over all actions. ``recon`` and
    ``anchor`` are time-major mels.
    """

    idx1: np.ndarray
    idx2: np.ndarray
    log_probs: np.ndarray
    rewards: np.ndarray
    recon: np.ndarray | None = None
    anchor: np.ndarray | None = None  # deterministic (argmax) reconstruction of the input
    advantages: np.ndarray = field(init=False)

    def __post_init__(self):
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        if self.rewards.size == 0:
            raise ValueError("empty rollout group")
        self.advantages = advantages(self.rewards)

    @property
    def size(self) -> int:
        return self.rewards.size

    @property
    def mean_reward(self) -> float:
        return float(self.rewards.mean())


def rl_objective(log_probs, adv, w: Stage2LossWeights) -> float:
    """Value of the RL term for per-member summed log-probs."""
    lp = np.asarray(log_probs, dtype=np.float64)
    adv = np.asarray(adv, dtype=np.float64)
    if lp.size == 0:
        raise ValueError("empty rollout group")
    norm = 1.0 / lp.size if w.normalize_by_group else 1.0
    return float(-w.rl * norm * np.dot(lp, adv))


def rl_loss(group: RolloutGroup, w: Stage2LossWeights) -> float:
    return rl_objective(group.log_probs, group.advantages, w)


def rl_grad_weights(group: RolloutGroup, w: Stage2LossWeights) -> np.ndarray:
    """dL_rl / d(log_prob of member i), with advantages held constant."""
    norm = 1.0 / group.size if w.normalize_by_group else 1.0
    return -w.rl * norm * group.advantages


def stage2_loss(group: RolloutGroup, ref_mel, w: Stage2LossWeights) -> float:
    """RL term plus ``w.mel`` times the L1 between ``group.anchor`` and ``ref_mel``."""
    if group.anchor is None:
        raise ValueError("group has no deterministic reconstruction")
    return rl_loss(group, w) + w.mel * mel_l1(group.anchor, ref_mel)


def run_bandit(reward_table, steps: int = 200, group_size: int = 16, lr: float = 0.05,
               tau: float = 1.0, seed: int = 0,
               w: Stage2LossWeights = Stage2LossWeights(mel=0.0)) -> np.ndarray:
    """One-frame bandit: GRPO on free logits over the levels, rewards read from a fixed table.

    Logits start at zero (uniform policy) and are updated with AdamW, no decay.
    Returns the probability of the best level after each step, length ``steps + 1``.
    """
    from . import nn
    from .quantizer import probs, sample_index

    table = np.asarray(reward_table, dtype=np.float64)
    theta = nn.Parameter(np.zeros(table.size))
    opt = nn.AdamW([theta], lr=lr, weight_decay=0.0)
    rng = np.random.default_rng(seed)
    best = int(np.argmax(table))
    history = [float(probs(theta.value, tau)[best])]
    for _ in range(steps):
        actions = sample_index(np.broadcast_to(theta.value, (group_size, table.size)), tau, rng)
        p = probs(theta.value, tau)
        coef = rl_grad_weights(RolloutGroup(actions, actions, np.zeros(group_size), table[actions]), w)
        # d log pi(a) / d theta = (onehot(a) - p) / tau
        onehot = np.eye(table.size)[actions]
        theta.grad += coef @ (onehot - p) / tau
        opt.step()
        history.append(float(probs(theta.value, tau)[best]))
    return np.array(history)
