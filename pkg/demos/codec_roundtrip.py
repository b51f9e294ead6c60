"""
Synthetic speech, a short Stage 1 run, and the 300 bps bitstream
================================================================

A few hundred steps on one CPU core; reconstructions are rough but the
token stream and its bitrate are exact.
"""

import numpy as np
from rlfsq import bitstream
from rlfsq.codec import Codec, CodecConfig
from rlfsq.synth import TemplateTranscriber, gen_corpus, make_alphabet
from rlfsq.train import Stage1Config, evaluate, train_stage1

# sixteen symbols, each an 8-frame mel template; utterances are 4-12 symbols
alphabet = make_alphabet(16, 80, seed=0)
train = gen_corpus(200, (4, 12), alphabet, 0.5, seed=1)
held = gen_corpus(50, (4, 12), alphabet, 0.5, seed=2)
asr = TemplateTranscriber(alphabet)
print("transcriber WER on clean inputs:", evaluate(None, held, asr).wer)

model = Codec(CodecConfig())
losses = train_stage1(model, train, Stage1Config(steps=300))
print(f"loss {losses[0]:.3f} -> {losses[-1]:.3f}")
res = evaluate(model, held, asr)
print(f"held-out WER {res.wer:.3f}, mel L1 {res.mel_l1:.3f}")

# 64 token frames of 24 bits: 5.12 s of audio in 192 payload bytes
mel = np.tile(held[0].mel, (8, 1))[:512]
codes = model.encode_mel(mel)
data = bitstream.pack(codes)
print(codes.shape, "frames ->", len(data) - bitstream.HEADER_SIZE, "payload bytes",
      bitstream.bitrate(12.5, 24), "bps")
assert np.array_equal(bitstream.unpack(data), codes)
