"""Log-mel feature extraction on a 10 ms hop, plus the mel L1 distance.

Waveforms are single-channel 16 kHz. A ``LogMel`` is a time-major float64
matrix of shape ``(T, n_mels)``.
"""
from __future__ import annotations

import struct
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

LOGMEL_MAGIC = b"CLMF"


class FormatError(ValueError):
    """Raised when a file does not match its binary layout."""


@dataclass(frozen=True)
class MelConfig:
    sample_rate: int = 16000
    hop: int = 160
    window: int = 400
    fft_size: int = 512
    n_mels: int = 80
    fmin: float = 0.0
    fmax: float = 8000.0
    log_floor: float = 1e-5

    def __post_init__(self):
        if self.sample_rate != 16000:
            raise ValueError("only 16 kHz input is supported")
        if not (0 < self.hop <= self.window <= self.fft_size):
            raise ValueError("need 0 < hop <= window <= fft_size")
        if self.n_mels < 1:
            raise ValueError("n_mels must be >= 1")
        if not (0 <= self.fmin < self.fmax <= self.sample_rate / 2):
            raise ValueError("invalid frequency range")
        if self.log_floor <= 0:
            raise ValueError("log_floor must be positive")

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1


INPUT_MEL = MelConfig()


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: MelConfig) -> np.ndarray:
    """Triangular filters, ``(n_mels, fft_size // 2 + 1)``, peak height 1.

    Edges are equally spaced on the HTK mel scale between ``fmin`` and
    ``fmax``; weights are the triangles evaluated at the FFT bin frequencies.
    """
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2))
    freqs = np.arange(cfg.n_bins) * cfg.sample_rate / cfg.fft_size
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    fb = np.clip(np.minimum(rising, falling), 0.0, None)
    if np.any(fb.sum(axis=1) <= 0):
        raise ValueError("a mel filter covers no FFT bin; lower n_mels or raise fft_size")
    return fb


def _frames(wave_: np.ndarray, cfg: MelConfig) -> np.ndarray:
    n = wave_.shape[0]
    n_frames = -(-n // cfg.hop)
    left = cfg.window // 2
    right = max(0, (n_frames - 1) * cfg.hop + cfg.window - left - n)
    mode = "reflect" if n > 1 else "edge"
    padded = np.pad(wave_, (left, right), mode=mode)
    idx = np.arange(n_frames)[:, None] * cfg.hop + np.arange(cfg.window)[None, :]
    return padded[idx]


def power_spectrogram(wave_, cfg: MelConfig = INPUT_MEL) -> np.ndarray:
    x = np.asarray(wave_, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] == 0:
        raise ValueError("expected a nonempty 1-D waveform")
    if not np.all(np.isfinite(x)):
        raise ValueError("waveform contains non-finite samples")
    frames = _frames(x, cfg) * np.hanning(cfg.window + 1)[:-1]  # periodic Hann
    spec = np.fft.rfft(frames, n=cfg.fft_size, axis=-1)
    return spec.real ** 2 + spec.imag ** 2


def log_mel(wave_, cfg: MelConfig = INPUT_MEL) -> np.ndarray:
    """Natural-log mel energies, ``(ceil(len / hop), n_mels)``.

    Frames are centered on multiples of the hop, with reflect padding at
    both ends.
    """
    energy = power_spectrogram(wave_, cfg) @ mel_filterbank(cfg).T
    return np.log(energy + cfg.log_floor)


def mel_l1(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.mean(np.abs(a - b)))


def write_logmel(path, mel) -> None:
    mel = np.asarray(mel)
    if mel.ndim != 2:
        raise ValueError("LogMel must be a 2-D (frames, bins) matrix")
    t, m = mel.shape
    with open(path, "wb") as fh:
        fh.write(LOGMEL_MAGIC + struct.pack("<II", t, m))
        fh.write(np.ascontiguousarray(mel, dtype="<f4").tobytes())


def read_logmel(path) -> np.ndarray:
    """Load a LogMel file; values come back as float64."""
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != LOGMEL_MAGIC:
        raise FormatError(f"{path}: not a LogMel file")
    t, m = struct.unpack_from("<II", data, 4)
    if len(data) != 12 + 4 * t * m:
        raise FormatError(f"{path}: expected {t}x{m} floats, got {len(data) - 12} payload bytes")
    return np.frombuffer(data, dtype="<f4", offset=12).reshape(t, m).astype(np.float64)


def read_wave(path) -> np.ndarray:
    """Read 16-bit PCM WAV or raw little-endian float32 samples at 16 kHz."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == b"RIFF":
        with wave.open(str(path), "rb") as w:
            if w.getnchannels() != 1 or w.getsampwidth() != 2:
                raise FormatError(f"{path}: expected mono 16-bit PCM")
            if w.getframerate() != 16000:
                raise FormatError(f"{path}: expected 16 kHz, got {w.getframerate()}")
            pcm = np.frombuffer(w.readframes(w.getnframes()), dtype="<i2")
        return pcm.astype(np.float64) / 32768.0
    raw = path.read_bytes()
    if len(raw) % 4:
        raise FormatError(f"{path}: raw float32 input length is not a multiple of 4")
    return np.frombuffer(raw, dtype="<f4").astype(np.float64)


def write_wave(path, samples) -> None:
    pcm = np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(16000)
        w.writeframes(pcm.tobytes())
