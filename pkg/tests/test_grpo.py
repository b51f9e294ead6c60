import math

import numpy as np
import pytest
from hypothesis import assume, given, strategies as st

from rlfsq import grpo, nn
from rlfsq.codec import Codec, CodecConfig
from rlfsq.grpo import RolloutGroup, Stage2LossWeights, advantages, rl_loss, stage2_loss
from rlfsq.train import Stage2Config, prepare_stage2, stage2_step

rewards_st = st.lists(st.floats(-10, 10, allow_nan=False), min_size=2, max_size=32)


def test_worked_examples():
    assert np.array_equal(advantages([0.3, 0.3, 0.3]), np.zeros(3))
    np.testing.assert_allclose(advantages([0.0, 1.0]), [-1, 1], atol=1e-6)
    np.testing.assert_allclose(advantages([1.0, 2.0, 3.0]), [-1.2247, 0, 1.2247], atol=1e-4)
    with pytest.raises(ValueError):
        advantages([1.0])


@given(rewards_st)
def test_normalized(r):
    r = np.array(r)
    assume(r.std() > 1e-3)
    a = advantages(r)
    assert abs(a.mean()) < 1e-9
    assert abs(a.std() - 1) < 1e-6


@given(rewards_st, st.floats(-100, 100), st.floats(0.1, 100))
def test_shift_scale_invariance(r, shift, scale):
    r = np.array(r)
    assume(r.std() > 1e-3)
    a = advantages(r)
    np.testing.assert_allclose(advantages(r + shift), a, atol=1e-6)
    # the 1e-8 stabilizer shifts the result by about eps / std
    tol = 1e-6 + 2e-8 / min(r.std(), scale * r.std()) * np.abs(a).max()
    np.testing.assert_allclose(advantages(r * scale), a, atol=tol)


@given(st.floats(-5, 5), st.integers(2, 20))
def test_degenerate_group(v, g):
    assert np.array_equal(advantages(np.full(g, v)), np.zeros(g))


def two_member_group(rewards, recon_err=0.0):
    """Two-action policy: member i took level i at logits (0, log 3), tau 1."""
    p = np.array([0.25, 0.75])
    lp = np.log(p)
    anchor = np.full((8, 2), recon_err)
    return RolloutGroup(np.array([0, 1]), np.array([0, 1]), lp, rewards, anchor=anchor)


def test_rl_loss_hand_trace():
    grp = two_member_group([0.0, 1.0])
    # A = (-1, 1) up to the stabilizer; L = -10 * 1/2 * (-log .25 + log .75) = -5 log 3
    assert rl_loss(grp, Stage2LossWeights()) == pytest.approx(-5 * math.log(3), abs=1e-6)
    strict = Stage2LossWeights(normalize_by_group=False)
    assert rl_loss(grp, strict) == pytest.approx(-10 * math.log(3), abs=1e-6)


def test_zero_advantage_has_zero_loss_and_gradient():
    grp = two_member_group([0.5, 0.5])
    assert rl_loss(grp, Stage2LossWeights()) == 0.0
    assert np.all(grpo.rl_grad_weights(grp, Stage2LossWeights()) == 0)


def test_stage2_loss_weights():
    grp = two_member_group([0.0, 1.0], recon_err=0.25)
    ref = np.zeros((8, 2))
    both = stage2_loss(grp, ref, Stage2LossWeights(rl=10, mel=1))
    only_mel = stage2_loss(grp, ref, Stage2LossWeights(rl=0, mel=1))
    only_rl = stage2_loss(grp, ref, Stage2LossWeights(rl=10, mel=0))
    assert only_mel == pytest.approx(0.25)
    assert only_rl == rl_loss(grp, Stage2LossWeights())
    assert both == pytest.approx(only_mel + only_rl)
    # flip the sign of the RL term so both are positive
    pos = two_member_group([1.0, 0.0], recon_err=0.25)
    total = stage2_loss(pos, ref, Stage2LossWeights())
    assert total > stage2_loss(pos, ref, Stage2LossWeights(rl=0)) > 0
    assert total > stage2_loss(pos, ref, Stage2LossWeights(mel=0)) > 0
    with pytest.raises(ValueError):
        stage2_loss(grp, np.zeros((8, 3)), Stage2LossWeights())


def test_advantages_carry_no_gradient():
    # the gradient weights depend on rewards only through the normalized advantages
    a = two_member_group([0.0, 1.0])
    b = two_member_group([0.0, 7.0])
    w = Stage2LossWeights()
    np.testing.assert_allclose(grpo.rl_grad_weights(a, w), grpo.rl_grad_weights(b, w), atol=1e-8)
    np.testing.assert_allclose(grpo.rl_grad_weights(a, w), -5 * a.advantages)


class CaptureOptimizer:
    """Stands in for AdamW: records gradients instead of stepping."""

    def __init__(self, params):
        self.params = params
        self.grads = None

    def step(self, lr=None):
        self.grads = {k: p.grad.copy() for k, p in self.params.items()}
        for p in self.params.values():
            p.grad[...] = 0.0


def digit_transcriber(mel):
    """Low-order digits of the total magnitude: arbitrary but deterministic tokens.

    The gradient check only needs fixed, non-degenerate advantages.
    """
    return list(f"{int(np.abs(mel).sum() * 1e6):d}"[-4:])


def test_stage2_gradient_matches_finite_differences():
    cfg_model = CodecConfig(n_mels=6, base_channels=4, seed=3)
    model = Codec(cfg_model)
    rng = np.random.default_rng(0)
    for p in model.parameters():
        p.value[...] = rng.normal(scale=0.3, size=p.shape)
    prepare_stage2(model)
    cfg = Stage2Config(batch_size=2, group_size=4, crop_frames=16, tau=0.3)
    x = rng.normal(size=(2, 6, 16))
    opt = CaptureOptimizer(model.named_parameters())
    res = stage2_step(x, model, opt, 0.0, cfg, digit_transcriber, np.random.default_rng(1))
    assert any(np.any(g.advantages != 0) for g in res.groups)

    q = model.quantizer
    w = cfg.weights
    b0 = q.quantize(model.encoder.forward(x).transpose(0, 2, 1)).bounded
    offset = q.quantize_bounded(b0).value - b0

    def f():
        b = q.quantize(model.encoder.forward(x).transpose(0, 2, 1)).bounded
        anchor = model.decode_values(b + offset)
        total = 0.0
        for i, grp in enumerate(res.groups):
            bi = np.broadcast_to(b[i], grp.idx1.shape)
            lp = q.action_log_prob(bi, grp.idx1, grp.idx2, cfg.tau).sum(axis=(1, 2))
            total += grpo.rl_objective(lp, grp.advantages, w)
            total += w.mel * float(np.mean(np.abs(anchor[i] - x[i])))
        return total / len(res.groups)

    for name, p in model.group_params("encoder").items():
        err = nn.grad_error(opt.grads[name], nn.numerical_grad(f, p.value))
        assert err < 1e-4, (name, err)


def test_bandit_improves_monotonically():
    table = -((np.arange(8) - 5) / 7.0) ** 2
    runs = np.array([grpo.run_bandit(table, steps=200, seed=s) for s in range(5)])
    mean = runs.mean(0)
    assert mean[0] == pytest.approx(1 / 8)
    assert mean[-1] > 0.9
    checkpoints = mean[::20]
    assert np.all(np.diff(checkpoints) > 0)
