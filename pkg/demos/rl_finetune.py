"""
Reward-driven encoder fine-tuning
=================================

Stage 1 is stopped early (held-out WER between 15% and 40%); Stage 2 then
updates only the encoder with GRPO, rewarding low transcription error.
Takes about 15 minutes on one CPU core.
"""

import numpy as np
from rlfsq.codec import Codec, CodecConfig
from rlfsq.synth import TemplateTranscriber, gen_corpus, make_alphabet
from rlfsq.train import Stage1Config, Stage2Config, evaluate, train_stage1, train_stage2

alphabet = make_alphabet(16, 80, seed=0)
train = gen_corpus(200, (4, 12), alphabet, 0.5, seed=1)
held = gen_corpus(200, (4, 12), alphabet, 0.5, seed=2)
asr = TemplateTranscriber(alphabet)

model = Codec(CodecConfig())


def stop_when_rough(step, m):
    return step % 25 == 0 and 0.15 <= evaluate(m, held, asr).wer <= 0.40


train_stage1(model, train, Stage1Config(steps=2000), callback=stop_when_rough)
before = evaluate(model, held, asr)
print(f"after stage 1: WER {before.wer:.3f}, mel L1 {before.mel_l1:.4f}")

decoder_hash = model.group_hash("decoder")


def report(step, m, res):
    if step % 250 == 0:
        e = evaluate(m, held, asr)
        print(f"step {step:4d}: group reward {res.mean_reward:+.3f}, held-out WER {e.wer:.3f}")
    return False


# a low sampling temperature keeps rollouts near the deterministic tokens
cfg = Stage2Config(steps=2000, tau=0.01, peak_lr=1e-4)
train_stage2(model, train, cfg, asr, callback=report)
after = evaluate(model, held, asr)
print(f"after stage 2: WER {after.wer:.3f} ({(before.wer - after.wer) / before.wer:.0%} lower), "
      f"mel L1 {after.mel_l1:.4f}")
print("decoder unchanged:", model.group_hash("decoder") == decoder_hash)
