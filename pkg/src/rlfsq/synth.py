"""Synthetic symbol corpus and a nearest-template transcriber.

Each symbol owns a fixed 8-frame log-mel template, so one symbol lines up
with exactly one latent frame after 8x downsampling. Utterances are template
concatenations plus i.i.d. Gaussian noise.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dsp import read_logmel, write_logmel

FRAMES_PER_SYMBOL = 8
MANIFEST = "manifest.tsv"


@dataclass(frozen=True)
class SymbolAlphabet:
    templates: np.ndarray  # (K, 8, n_mels)

    @property
    def size(self) -> int:
        return self.templates.shape[0]

    @property
    def n_mels(self) -> int:
        return self.templates.shape[2]

    def min_distance(self) -> float:
        flat = self.templates.reshape(self.size, -1)
        d = np.sqrt(((flat[:, None] - flat[None]) ** 2).sum(-1))
        return float(d[~np.eye(self.size, dtype=bool)].min())


def _centered_conv(v, kern):
    # zero-padded convolution trimmed to len(v), valid even when the kernel is longer
    start = (len(kern) - 1) // 2
    return np.convolve(v, kern, mode="full")[start:start + len(v)]


def make_alphabet(n_symbols: int = 16, n_mels: int = 80, *, separation: float = 12.0,
                  smooth: float = 3.0, base_level: float = -4.0, seed: int = 0) -> SymbolAlphabet:
    """Smooth random templates, orthogonalized so every pair is ``separation`` apart.

    Gaussian fields are smoothed along frequency (``smooth`` bins) and time,
    Gram-Schmidt orthonormalized, then scaled; pairwise L2 distances are all
    ``separation`` (up to rounding). ``base_level`` is a shared offset.
    """
    if n_symbols < 1:
        raise ValueError("alphabet must be nonempty")
    dim = FRAMES_PER_SYMBOL * n_mels
    if n_symbols > dim:
        raise ValueError("more symbols than template dimensions")
    rng = np.random.default_rng(seed)
    raw = rng.normal(size=(n_symbols, FRAMES_PER_SYMBOL, n_mels))
    if smooth > 0:
        k = np.arange(-3 * int(np.ceil(smooth)), 3 * int(np.ceil(smooth)) + 1)
        kern = np.exp(-0.5 * (k / smooth) ** 2)
        kern /= kern.sum()
        raw = np.apply_along_axis(_centered_conv, 2, raw, kern)
        raw = np.apply_along_axis(_centered_conv, 1, raw, np.array([0.25, 0.5, 0.25]))
    q, _ = np.linalg.qr(raw.reshape(n_symbols, dim).T)
    basis = q.T * (separation / np.sqrt(2.0))
    return SymbolAlphabet(basis.reshape(n_symbols, FRAMES_PER_SYMBOL, n_mels) + base_level)


@dataclass
class Utterance:
    transcript: np.ndarray  # symbol ids
    mel: np.ndarray         # (8 * len, n_mels)
    noise_seed: int


def render(transcript, alphabet: SymbolAlphabet) -> np.ndarray:
    """Noise-free mel for a symbol sequence."""
    ids = np.asarray(transcript, dtype=np.int64)
    return alphabet.templates[ids].reshape(-1, alphabet.n_mels)


def gen_corpus(n_utts: int, len_range: tuple[int, int], alphabet: SymbolAlphabet,
               noise_scale: float, seed: int) -> list[Utterance]:
    """Utterances with uniform lengths in ``len_range`` (inclusive) and uniform symbols."""
    lo, hi = len_range
    if alphabet.size == 0:
        raise ValueError("empty alphabet")
    if lo < 1 or hi < lo:
        raise ValueError("length range must be nonempty and positive")
    if noise_scale < 0:
        raise ValueError("noise_scale must be nonnegative")
    master = np.random.default_rng(seed)
    seeds = master.integers(0, 2**63 - 1, size=n_utts)
    out = []
    for s in seeds:
        rng = np.random.default_rng(int(s))
        n = int(rng.integers(lo, hi + 1))
        ids = rng.integers(0, alphabet.size, size=n)
        mel = render(ids, alphabet)
        if noise_scale > 0:
            mel = mel + noise_scale * rng.normal(size=mel.shape)
        out.append(Utterance(ids, mel, int(s)))
    return out


def segment_symbols(mel, alphabet: SymbolAlphabet) -> np.ndarray:
    """Nearest-template symbol id per 8-frame segment; a trailing partial segment is dropped."""
    mel = np.asarray(mel, dtype=np.float64)
    n = mel.shape[0] // FRAMES_PER_SYMBOL
    if n == 0:
        raise ValueError(f"need at least {FRAMES_PER_SYMBOL} frames")
    segs = mel[: n * FRAMES_PER_SYMBOL].reshape(n, 1, -1)
    flat = alphabet.templates.reshape(1, alphabet.size, -1)
    d = ((segs - flat) ** 2).sum(-1)
    return np.argmin(d, axis=1)  # first minimum = lower id on ties


class TemplateTranscriber:
    """Deterministic stand-in for an ASR model; returns symbol ids."""

    def __init__(self, alphabet: SymbolAlphabet):
        self.alphabet = alphabet

    def __call__(self, mel) -> list[int]:
        return segment_symbols(mel, self.alphabet).tolist()


def template_transcribe(mel, alphabet: SymbolAlphabet) -> list[int]:
    return segment_symbols(mel, alphabet).tolist()


def save_corpus(directory, corpus: list[Utterance]) -> Path:
    """Write ``utt#####.clmf`` files and a tab-separated transcript manifest."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, utt in enumerate(corpus):
        name = f"utt{i:05d}.clmf"
        write_logmel(d / name, utt.mel)
        lines.append(f"{name}\t{' '.join(str(int(s)) for s in utt.transcript)}")
    (d / MANIFEST).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return d / MANIFEST


def load_corpus(directory) -> list[Utterance]:
    d = Path(directory)
    out = []
    for line in (d / MANIFEST).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        name, _, ids = line.partition("\t")
        out.append(Utterance(np.array([int(t) for t in ids.split()], dtype=np.int64),
                             read_logmel(d / name), -1))
    return out


def save_alphabet(path, alphabet: SymbolAlphabet) -> None:
    np.save(path, alphabet.templates)


def load_alphabet(path) -> SymbolAlphabet:
    return SymbolAlphabet(np.load(path))
