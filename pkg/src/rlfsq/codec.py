"""Encoder/decoder around the residual quantizer.

The encoder maps a ``(T, n_mels)`` log-mel to ``ceil(T/8)`` 4-dim latent
frames through three stride-2 resampling blocks; the decoder mirrors it.
Each resampling block is a learnable strided convolution plus a fixed,
parameter-free shortcut (average pool + channel duplication going down,
nearest upsample + channel half-mean going up).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import nn
from .quantizer import QuantizeResult, ResidualQuantizer, bound


@dataclass(frozen=True)
class CodecConfig:
    n_mels: int = 80
    base_channels: int = 32
    blocks_per_stage: int = 1
    latent_dim: int = 4
    downsample_factor: int = 8
    use_grn: bool = True
    kernel: int = 7
    seed: int = 0

    def __post_init__(self):
        if self.downsample_factor != 8:
            raise ValueError("the codec downsamples by exactly 2**3")
        if self.latent_dim != 4:
            raise ValueError("latent_dim must match the 4-dim quantizer")
        if self.base_channels < 1 or self.blocks_per_stage < 0 or self.n_mels < 1:
            raise ValueError("invalid codec sizes")

    @property
    def n_stages(self) -> int:
        return 3


class ConvNeXtBlock(nn.Module):
    """depthwise -> LayerNorm -> 4x expand -> GELU -> GRN -> project, plus residual."""

    def __init__(self, channels: int, rng: np.random.Generator, kernel: int = 7, use_grn: bool = True):
        self.dw = nn.DepthwiseConv(channels, rng, kernel)
        self.norm = nn.LayerNorm(channels)
        self.expand = nn.Pointwise(channels, 4 * channels, rng)
        self.act = nn.GELU()
        self.grn = nn.GRN(4 * channels) if use_grn else None
        self.project = nn.Pointwise(4 * channels, channels, rng, gain=0.5)

    def forward(self, x):
        h = self.act(self.expand(self.norm(self.dw(x))))
        if self.grn is not None:
            h = self.grn(h)
        return nn.add(x, self.project(h))

    def backward(self, dy):
        dh = self.project.backward(dy)
        if self.grn is not None:
            dh = self.grn.backward(dh)
        dh = self.dw.backward(self.norm.backward(self.expand.backward(self.act.backward(dh))))
        return dy + dh


class DownBlock(nn.Module):
    def __init__(self, channels: int, rng: np.random.Generator):
        self.conv = nn.StridedConv(channels, 2 * channels, rng, gain=0.5)
        self.pool = nn.AvgPool2()
        self.widen = nn.ChannelRepeat()

    def shortcut(self, x):
        return self.widen(self.pool(x))

    def forward(self, x):
        if x.shape[2] % 2:
            raise ValueError("downsample block needs an even length")
        return nn.add(self.conv(x), self.shortcut(x))

    def backward(self, dy):
        return self.conv.backward(dy) + self.pool.backward(self.widen.backward(dy))


class UpBlock(nn.Module):
    def __init__(self, channels: int, rng: np.random.Generator):
        self.conv = nn.TransposedConv(channels, channels // 2, rng, gain=0.5)
        self.up = nn.NearestUpsample2()
        self.narrow = nn.ChannelHalfMean()

    def shortcut(self, x):
        return self.narrow(self.up(x))

    def forward(self, x):
        return nn.add(self.conv(x), self.shortcut(x))

    def backward(self, dy):
        return self.conv.backward(dy) + self.up.backward(self.narrow.backward(dy))


class Encoder(nn.Module):
    def __init__(self, cfg: CodecConfig, rng: np.random.Generator):
        c = cfg.base_channels
        self.stem = nn.Pointwise(cfg.n_mels, c, rng)
        self.stem_norm = nn.LayerNorm(c)
        self.stages = []
        for s in range(cfg.n_stages):
            width = c * 2 ** s
            blocks = [ConvNeXtBlock(width, rng, cfg.kernel, cfg.use_grn) for _ in range(cfg.blocks_per_stage)]
            self.stages.append(_Stage(blocks, DownBlock(width, rng)))
        self.out_norm = nn.LayerNorm(c * 2 ** cfg.n_stages)
        # small init keeps sigmoid(z) away from saturation at the start
        self.out = nn.Pointwise(c * 2 ** cfg.n_stages, cfg.latent_dim, rng, gain=0.1)

    def forward(self, x):
        h = self.stem_norm(self.stem(x))
        for st in self.stages:
            h = st.forward(h)
        return self.out(self.out_norm(h))

    def backward(self, dy):
        dh = self.out_norm.backward(self.out.backward(dy))
        for st in reversed(self.stages):
            dh = st.backward(dh)
        return self.stem.backward(self.stem_norm.backward(dh))


class Decoder(nn.Module):
    def __init__(self, cfg: CodecConfig, rng: np.random.Generator):
        c = cfg.base_channels
        top = c * 2 ** cfg.n_stages
        self.inp = nn.Pointwise(cfg.latent_dim, top, rng)
        self.inp_norm = nn.LayerNorm(top)
        self.stages = []
        for s in range(cfg.n_stages):
            width = top // 2 ** s
            blocks = [ConvNeXtBlock(width // 2, rng, cfg.kernel, cfg.use_grn) for _ in range(cfg.blocks_per_stage)]
            self.stages.append(_Stage(blocks, UpBlock(width, rng), resample_first=True))
        self.out_norm = nn.LayerNorm(c)
        self.out = nn.Pointwise(c, cfg.n_mels, rng)

    def forward(self, q):
        h = self.inp_norm(self.inp(q))
        for st in self.stages:
            h = st.forward(h)
        return self.out(self.out_norm(h))

    def backward(self, dy):
        dh = self.out_norm.backward(self.out.backward(dy))
        for st in reversed(self.stages):
            dh = st.backward(dh)
        return self.inp.backward(self.inp_norm.backward(dh))


class _Stage(nn.Module):
    def __init__(self, blocks, resample, resample_first: bool = False):
        self.blocks = blocks
        self.resample = resample
        self.resample_first = resample_first

    def _order(self):
        return [self.resample, *self.blocks] if self.resample_first else [*self.blocks, self.resample]

    def forward(self, x):
        for m in self._order():
            x = m.forward(x)
        return x

    def backward(self, dy):
        for m in reversed(self._order()):
            dy = m.backward(dy)
        return dy


def pad_to_multiple(mel: np.ndarray, factor: int = 8) -> np.ndarray:
    """Edge-replicate trailing frames up to a multiple of ``factor``."""
    t = mel.shape[0]
    if t < 1:
        raise ValueError("empty mel")
    extra = -t % factor
    return np.pad(mel, ((0, extra), (0, 0)), mode="edge") if extra else mel


@dataclass
class Forward:
    """Everything one codec pass produced, kept for the backward."""

    z: np.ndarray          # (B, 4, T') raw latents
    quant: QuantizeResult  # arrays in (B, T', 4) layout
    recon: np.ndarray      # (B, n_mels, T)


class Codec(nn.Module):
    """Encoder + residual quantizer + decoder.

    Arrays inside are channel-first ``(B, C, T)``; the public ``encode_mel``
    / ``decode_codes`` helpers use the time-major LogMel layout.
    """

    GROUPS = ("encoder", "quantizer", "decoder")

    def __init__(self, cfg: CodecConfig = CodecConfig(), quantizer: ResidualQuantizer | None = None):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.encoder = Encoder(cfg, rng)
        self.decoder = Decoder(cfg, rng)
        self.quantizer = quantizer or ResidualQuantizer()

    # grid points are fixed buffers; they are hashed but never optimized
    def group_params(self, group: str) -> dict[str, nn.Parameter]:
        if group == "encoder":
            return self.encoder.named_parameters("encoder.")
        if group == "decoder":
            return self.decoder.named_parameters("decoder.")
        if group == "quantizer":
            return {}
        raise KeyError(f"unknown parameter group {group!r}; expected one of {self.GROUPS}")

    def named_parameters(self, prefix: str = "") -> dict[str, nn.Parameter]:
        out = {}
        for g in self.GROUPS:
            out.update({prefix + k: v for k, v in self.group_params(g).items()})
        return out

    def group_hash(self, group: str) -> str:
        if group == "quantizer":
            return nn.param_hash({"layer1": self.quantizer.layer1.points,
                                  "layer2": self.quantizer.layer2.points})
        return nn.param_hash(self.group_params(group))

    # -- array-level passes ---------------------------------------------------

    def forward(self, x, tau: float = 1.0, rng: np.random.Generator | None = None,
                ste_offset: np.ndarray | None = None) -> Forward:
        """Encode, quantize and decode a ``(B, n_mels, T)`` batch, T divisible by 8.

        The decoder sees ``b + stop_gradient(q - b)``; ``ste_offset`` replaces
        the ``q - b`` term (used by finite-difference oracles).
        """
        z = self.encoder.forward(x)
        zt = z.transpose(0, 2, 1)
        quant = self.quantizer.quantize(zt, tau, rng)
        offset = quant.value - quant.bounded if ste_offset is None else ste_offset
        q_in = (quant.bounded + offset).transpose(0, 2, 1)
        recon = self.decoder.forward(q_in)
        return Forward(z, quant, recon)

    def backward_from_bounded(self, d_bounded_t: np.ndarray, z: np.ndarray) -> None:
        """Backprop ``dL/d sigmoid(z)`` in ``(B, T', 4)`` layout into the encoder."""
        s = bound(z)
        dz = d_bounded_t.transpose(0, 2, 1) * s * (1.0 - s)
        self.encoder.backward(dz)

    def backward(self, d_recon: np.ndarray, fwd: Forward) -> np.ndarray:
        """Straight-through backward; returns dL/d bounded in ``(B, T', 4)``."""
        dq = self.decoder.backward(d_recon)
        d_bounded = dq.transpose(0, 2, 1)
        self.backward_from_bounded(d_bounded, fwd.z)
        return d_bounded

    def decode_values(self, q: np.ndarray) -> np.ndarray:
        """Decode ``(B, T', 4)`` dequantized latents to ``(B, n_mels, 8 T')``."""
        return self.decoder.forward(np.asarray(q, dtype=np.float64).transpose(0, 2, 1))

    # -- LogMel-level helpers ---------------------------------------------------

    def encode_mel(self, mel: np.ndarray) -> np.ndarray:
        """Deterministic token codes ``(ceil(T/8), 2)`` for one ``(T, n_mels)`` mel."""
        x = pad_to_multiple(np.asarray(mel, dtype=np.float64), self.cfg.downsample_factor)
        z = self.encoder.forward(x.T[None])
        return self.quantizer.quantize(z.transpose(0, 2, 1)).codes[0]

    def latents(self, mel: np.ndarray) -> np.ndarray:
        x = pad_to_multiple(np.asarray(mel, dtype=np.float64), self.cfg.downsample_factor)
        return self.encoder.forward(x.T[None]).transpose(0, 2, 1)[0]

    def decode_codes(self, codes: np.ndarray, n_frames: int | None = None) -> np.ndarray:
        """``(T', 2)`` codes -> ``(T, n_mels)`` mel, trimmed to ``n_frames`` if given."""
        q = self.quantizer.decode_codes(np.asarray(codes))
        mel = self.decode_values(q[None])[0].T
        return mel if n_frames is None else mel[:n_frames]

    def reconstruct(self, mel: np.ndarray) -> np.ndarray:
        mel = np.asarray(mel, dtype=np.float64)
        return self.decode_codes(self.encode_mel(mel), mel.shape[0])

    # -- persistence -----------------------------------------------------------

    def save(self, path, optimizer: nn.AdamW | None = None, original_frames: int | None = None) -> None:
        nn.save_checkpoint(path, self.named_parameters(), optimizer)
        write_metadata(_meta_path(path), self.cfg, original_frames)

    @classmethod
    def load(cls, path, optimizer: nn.AdamW | None = None) -> "Codec":
        cfg, _ = read_metadata(_meta_path(path))
        model = cls(cfg)
        nn.load_checkpoint(path, model.named_parameters(), optimizer)
        return model


def _meta_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta")


def write_metadata(path, cfg: CodecConfig, original_frames: int | None = None) -> None:
    lines = [f"{k} = {v}" for k, v in asdict(cfg).items()]
    if original_frames is not None:
        lines.append(f"original_frames = {original_frames}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_metadata(path) -> tuple[CodecConfig, int | None]:
    types = {f.name: f.type for f in fields(CodecConfig)}
    kwargs, original = {}, None
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, _, val = (s.strip() for s in line.partition("="))
        if key == "original_frames":
            original = int(val)
        elif key in types:
            kwargs[key] = (val == "True") if types[key] in (bool, "bool") else int(val)
        else:
            raise ValueError(f"{path}: unknown metadata key {key!r}")
    return CodecConfig(**kwargs), original
