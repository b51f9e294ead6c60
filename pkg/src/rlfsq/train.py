"""Reconstruction pre-training and RL fine-tuning loops.

Stage 1 trains encoder and decoder on ``rec_weight * L1`` with deterministic
quantization and straight-through gradients. Stage 2 freezes decoder and
quantizer and updates the encoder from GRPO rollouts plus a mel anchor.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence, TextIO

import numpy as np

from . import grpo, nn
from .codec import Codec, pad_to_multiple
from .dsp import mel_l1
from .reward import Transcriber, TranscriberError, wer
from .synth import Utterance


@dataclass(frozen=True)
class Stage1Config:
    steps: int = 2000
    batch_size: int = 16
    crop_frames: int = 32
    rec_weight: float = 15.0
    peak_lr: float = 1e-3
    floor_lr: float = 0.0
    weight_decay: float = 1e-2
    stochastic: bool = False
    tau: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1 or self.crop_frames < 8:
            raise ValueError("steps, batch_size and crop_frames must be positive")
        if self.crop_frames % 8:
            raise ValueError("crop_frames must be a multiple of 8")


@dataclass(frozen=True)
class Stage2Config:
    steps: int = 2000
    batch_size: int = 8
    group_size: int = 16
    crop_frames: int = 32
    tau: float = 1.0
    rl_weight: float = 10.0
    mel_weight: float = 1.0
    normalize_by_group: bool = True
    peak_lr: float = 1e-5
    floor_lr: float = 0.0
    weight_decay: float = 1e-2
    seed: int = 0

    def __post_init__(self):
        if self.group_size < 2:
            raise ValueError("group_size must be at least 2")
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be positive")
        if self.crop_frames % 8 or self.crop_frames < 8:
            raise ValueError("crop_frames must be a positive multiple of 8")
        if not self.tau > 0:
            raise ValueError("tau must be positive")

    @property
    def weights(self) -> grpo.Stage2LossWeights:
        return grpo.Stage2LossWeights(self.rl_weight, self.mel_weight, self.normalize_by_group)


def freeze(model: Codec, selector: str | Iterable[str], frozen: bool = True) -> None:
    """Set the frozen flag on every parameter of the named groups."""
    groups = [selector] if isinstance(selector, str) else list(selector)
    for g in groups:
        model.group_params(g)  # raises on unknown names before anything changes
    for g in groups:
        for p in model.group_params(g).values():
            p.frozen = frozen


def unfreeze(model: Codec, selector: str | Iterable[str]) -> None:
    freeze(model, selector, frozen=False)


def sample_batch(corpus: Sequence[Utterance], batch_size: int, crop: int,
                 rng: np.random.Generator) -> np.ndarray:
    """Random symbol-aligned crops as a ``(B, n_mels, crop)`` array.

    Utterances shorter than ``crop`` are edge-padded.
    """
    out = []
    for i in rng.integers(0, len(corpus), size=batch_size):
        mel = corpus[i].mel
        if mel.shape[0] < crop:
            mel = np.pad(mel, ((0, crop - mel.shape[0]), (0, 0)), mode="edge")
        starts = np.arange(0, mel.shape[0] - crop + 1, 8)
        s = int(rng.choice(starts))
        out.append(mel[s:s + crop].T)
    return np.stack(out)


def make_optimizer(model: Codec, peak_lr: float, weight_decay: float) -> nn.AdamW:
    return nn.AdamW(model.parameters(), lr=peak_lr, betas=(0.8, 0.9), eps=1e-8,
                    weight_decay=weight_decay)


# -- stage 1 ------------------------------------------------------------------

def stage1_loss_and_grad(model: Codec, x: np.ndarray, rec_weight: float,
                         tau: float = 1.0, rng=None, ste_offset=None) -> float:
    """Forward + backward of ``rec_weight * L1``; gradients accumulate in place."""
    fwd = model.forward(x, tau=tau, rng=rng, ste_offset=ste_offset)
    diff = fwd.recon - x
    loss = rec_weight * float(np.mean(np.abs(diff)))
    model.backward(rec_weight * np.sign(diff) / diff.size, fwd)
    return loss


def stage1_step(batch: np.ndarray, model: Codec, opt: nn.AdamW, lr: float,
                cfg: Stage1Config = Stage1Config(), rng: np.random.Generator | None = None) -> float:
    if any(p.frozen for p in model.parameters()):
        raise RuntimeError("stage 1 expects no frozen parameters")
    noise = rng if cfg.stochastic else None
    loss = stage1_loss_and_grad(model, batch, cfg.rec_weight, cfg.tau, noise)
    opt.step(lr)
    return loss


def _log(fh: TextIO | None, step: int, lr: float, loss: float, reward: float, t0: float) -> None:
    if fh is not None:
        fh.write(f"{step}\t{lr:.6g}\t{loss:.6f}\t{reward:.6f}\t{(time.perf_counter() - t0) * 1e3:.1f}\n")


def train_stage1(model: Codec, corpus: Sequence[Utterance], cfg: Stage1Config, *,
                 log: TextIO | None = None, callback: Callable[[int, Codec], bool] | None = None,
                 checkpoint_every: int = 0, checkpoint_path=None) -> list[float]:
    """Run up to ``cfg.steps`` updates; ``callback(step, model)`` returning True stops early."""
    rng = np.random.default_rng(cfg.seed)
    opt = make_optimizer(model, cfg.peak_lr, cfg.weight_decay)
    sched = nn.ScheduleConfig(cfg.steps, cfg.peak_lr, cfg.floor_lr)
    losses = []
    for step in range(1, cfg.steps + 1):
        t0 = time.perf_counter()
        lr = nn.one_cycle_lr(step, sched)
        batch = sample_batch(corpus, cfg.batch_size, cfg.crop_frames, rng)
        losses.append(stage1_step(batch, model, opt, lr, cfg, rng))
        _log(log, step, lr, losses[-1], float("nan"), t0)
        if checkpoint_every and checkpoint_path and step % checkpoint_every == 0:
            model.save(checkpoint_path, opt)
        if callback is not None and callback(step, model):
            break
    return losses


# -- stage 2 ------------------------------------------------------------------

@dataclass
class Stage2Result:
    loss: float
    mean_reward: float
    groups: list[grpo.RolloutGroup]


def _transcribe_all(transcriber: Transcriber, mels, ids) -> list[list]:
    out = []
    for mel, uid in zip(mels, ids):
        try:
            out.append(list(transcriber(mel)))
        except TranscriberError as exc:
            raise TranscriberError(f"utterance {uid}: {exc}") from exc
    return out


def stage2_step(batch: np.ndarray, model: Codec, opt: nn.AdamW, lr: float, cfg: Stage2Config,
                transcriber: Transcriber, rng: np.random.Generator,
                batch_ids: Sequence | None = None) -> Stage2Result:
    """One GRPO update of the encoder on a ``(B, n_mels, T)`` batch.

    Each batch member forms its own group of ``cfg.group_size`` samples. The
    reference transcript is the transcription of the input itself.
    """
    if not all(p.frozen for p in model.group_params("decoder").values()):
        raise RuntimeError("stage 2 requires a frozen decoder")
    ids = list(range(batch.shape[0])) if batch_ids is None else list(batch_ids)
    w = cfg.weights
    n_in, g = batch.shape[0], cfg.group_size
    q = model.quantizer

    z = model.encoder.forward(batch)
    b = q.quantize(z.transpose(0, 2, 1)).bounded  # (B, T', 4)
    b_rep = np.repeat(b, g, axis=0)               # (B*G, T', 4)
    sampled = q.quantize_bounded(b_rep, cfg.tau, rng)
    recon = model.decode_values(sampled.value)    # (B*G, n_mels, T)

    refs = _transcribe_all(transcriber, batch.transpose(0, 2, 1), ids)
    hyps = _transcribe_all(transcriber, recon.transpose(0, 2, 1), np.repeat(ids, g))
    rewards = np.array([-wer(h, refs[k // g]) for k, h in enumerate(hyps)]).reshape(n_in, g)

    logp = q.action_log_prob(b_rep, sampled.idx1, sampled.idx2, cfg.tau).sum(axis=(1, 2))
    dlogp = q.action_log_prob_grad(b_rep, sampled.idx1, sampled.idx2, cfg.tau)
    shape = (n_in, g) + b.shape[1:]

    # deterministic anchor pass; runs last so the decoder cache belongs to it
    det = q.quantize_bounded(b)
    anchor = model.decode_values(b + (det.value - b))

    groups, d_b = [], np.zeros_like(b)
    for i in range(n_in):
        grp = grpo.RolloutGroup(sampled.idx1.reshape(shape)[i], sampled.idx2.reshape(shape)[i],
                                logp.reshape(n_in, g)[i], rewards[i],
                                recon=recon.reshape(n_in, g, *recon.shape[1:])[i].transpose(0, 2, 1),
                                anchor=anchor[i].T)
        groups.append(grp)
        coef = grpo.rl_grad_weights(grp, w)
        d_b[i] = np.tensordot(coef, dlogp.reshape(shape)[i], axes=1) / n_in

    diff = anchor - batch
    if w.mel > 0:
        dq = model.decoder.backward(w.mel * np.sign(diff) / (diff[0].size * n_in))
        d_b += dq.transpose(0, 2, 1)
    model.backward_from_bounded(d_b, z)
    loss = float(np.mean([grpo.stage2_loss(grp, batch[i].T, w) for i, grp in enumerate(groups)]))
    opt.step(lr)
    return Stage2Result(loss, float(rewards.mean()), groups)


def prepare_stage2(model: Codec) -> None:
    unfreeze(model, Codec.GROUPS)
    freeze(model, ("decoder", "quantizer"))


def train_stage2(model: Codec, corpus: Sequence[Utterance], cfg: Stage2Config,
                 transcriber: Transcriber, *, log: TextIO | None = None,
                 callback: Callable[[int, Codec, Stage2Result], bool] | None = None,
                 checkpoint_every: int = 0, checkpoint_path=None) -> list[Stage2Result]:
    prepare_stage2(model)
    rng = np.random.default_rng(cfg.seed)
    opt = make_optimizer(model, cfg.peak_lr, cfg.weight_decay)
    sched = nn.ScheduleConfig(cfg.steps, cfg.peak_lr, cfg.floor_lr)
    history = []
    for step in range(1, cfg.steps + 1):
        t0 = time.perf_counter()
        lr = nn.one_cycle_lr(step, sched)
        batch = sample_batch(corpus, cfg.batch_size, cfg.crop_frames, rng)
        res = stage2_step(batch, model, opt, lr, cfg, transcriber, rng)
        res.groups = []  # keep memory flat over long runs
        history.append(res)
        _log(log, step, lr, res.loss, res.mean_reward, t0)
        if checkpoint_every and checkpoint_path and step % checkpoint_every == 0:
            model.save(checkpoint_path, opt)
        if callback is not None and callback(step, model, res):
            break
    return history


# -- evaluation ------------------------------------------------------------------

@dataclass(frozen=True)
class EvalResult:
    wer: float
    mel_l1: float
    per_utterance: tuple[float, ...]


def evaluate(model: Codec | None, corpus: Sequence[Utterance], transcriber: Transcriber) -> EvalResult:
    """Mean per-utterance WER and mel L1 of deterministic reconstructions.

    ``model=None`` bypasses the codec (reconstruction = input).
    """
    wers, l1s = [], []
    by_len: dict[int, list[int]] = {}
    for i, u in enumerate(corpus):
        by_len.setdefault(u.mel.shape[0], []).append(i)
    recon: dict[int, np.ndarray] = {}
    for t, idx in by_len.items():
        if model is None:
            for i in idx:
                recon[i] = corpus[i].mel
            continue
        x = np.stack([pad_to_multiple(corpus[i].mel).T for i in idx])
        fwd = model.forward(x)
        for k, i in enumerate(idx):
            recon[i] = fwd.recon[k].T[:t]
    for i, u in enumerate(corpus):
        ref = list(transcriber(u.mel))
        wers.append(wer(list(transcriber(recon[i])), ref))
        l1s.append(mel_l1(recon[i], u.mel))
    return EvalResult(float(np.mean(wers)), float(np.mean(l1s)), tuple(wers))
