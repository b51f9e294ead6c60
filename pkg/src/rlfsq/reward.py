"""Edit distance, WER, and the negative-WER reward."""
from __future__ import annotations

import subprocess
import tempfile
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np
from rapidfuzz.distance import Levenshtein

from .dsp import write_logmel


class Transcriber(Protocol):
    def __call__(self, mel: np.ndarray) -> Sequence: ...


class TranscriberError(RuntimeError):
    pass


def levenshtein(a: Sequence, b: Sequence) -> int:
    """Unit-cost edit distance (insert, delete, substitute)."""
    # rapidfuzz compares non-string items by hash; dense ids keep exact equality
    ids: dict = {}
    a_ids = [ids.setdefault(x, len(ids)) for x in a]
    b_ids = [ids.setdefault(x, len(ids)) for x in b]
    return Levenshtein.distance(a_ids, b_ids)


def wer(hyp: Sequence, ref: Sequence) -> float:
    """Edit distance over reference length; not clamped to 1."""
    if len(ref) == 0:
        raise ValueError("reference must be nonempty")
    return levenshtein(hyp, ref) / len(ref)


def reward(recon_mel, ref_mel, transcriber: Transcriber) -> float:
    """Negative WER of the reconstruction's transcript against the reference's."""
    return -wer(list(transcriber(recon_mel)), list(transcriber(ref_mel)))


class CommandTranscriber:
    """Runs ``command + [mel_path]`` and reads whitespace-separated tokens from stdout."""

    def __init__(self, command: Sequence[str], timeout: float | None = 60.0,
                 parse: Callable[[str], object] = str):
        self.command = list(command)
        self.timeout = timeout
        self.parse = parse

    def __call__(self, mel) -> list:
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "input.clmf"
            write_logmel(path, mel)
            try:
                proc = subprocess.run(self.command + [str(path)], capture_output=True,
                                      text=True, timeout=self.timeout)
            except (OSError, subprocess.TimeoutExpired) as exc:
                raise TranscriberError(f"transcriber failed to run: {exc}") from exc
        if proc.returncode != 0:
            raise TranscriberError(f"transcriber exited with {proc.returncode}: {proc.stderr.strip()}")
        return [self.parse(tok) for tok in proc.stdout.split()]
