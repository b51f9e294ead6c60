"""Command-line entry points: ``rlfsq <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data or format error.
"""
from __future__ import annotations

import argparse
import dataclasses
import sys
import typing
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import bitstream, dsp, synth
from .codec import Codec, CodecConfig
from .reward import CommandTranscriber, TranscriberError
from .train import Stage1Config, Stage2Config, evaluate, train_stage1, train_stage2

EXIT_USAGE = 1
EXIT_DATA = 2


class ConfigError(ValueError):
    pass


class UsageError(Exception):
    pass


@dataclass(frozen=True)
class SynthConfig:
    n_utts: int = 1000
    min_len: int = 4
    max_len: int = 12
    noise: float = 0.5
    n_symbols: int = 16
    n_mels: int = 80
    separation: float = 12.0
    alphabet_seed: int = 0
    seed: int = 0


SECTIONS = {
    "synth-gen": (SynthConfig,),
    "train-stage1": (CodecConfig, Stage1Config),
    "train-stage2": (Stage2Config,),
    "encode": (dsp.MelConfig,),
    "decode": (),
    "eval-wer": (),
}


def _coerce(key: str, raw: str, typ):
    if typ is bool:
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        return typ(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected {typ.__name__}, got {raw!r}") from None


def parse_config(text: str, classes) -> dict[str, object]:
    """Parse ``key = value`` lines; each key must be a field of one of ``classes``.

    Returns typed values keyed by field name.
    """
    types = {}
    for cls in classes:
        hints = typing.get_type_hints(cls)
        for f in dataclasses.fields(cls):
            types[f.name] = hints[f.name]
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {n}: unknown key {key!r}")
        out[key] = _coerce(key, raw, types[key])
    return out


def build(cls, values: dict):
    names = {f.name for f in dataclasses.fields(cls)}
    try:
        return cls(**{k: v for k, v in values.items() if k in names})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{cls.__name__}: {exc}") from None


def load_config(args, classes) -> dict:
    values = {}
    if args.config:
        values = parse_config(Path(args.config).read_text(encoding="utf-8"), classes)
    for flag in ("steps", "seed"):
        v = getattr(args, flag, None)
        if v is not None:
            if not any(flag in {f.name for f in dataclasses.fields(c)} for c in classes):
                raise UsageError(f"--{flag} does not apply to {args.command}")
            values[flag] = v
    return values


def _transcriber(args, corpus_dir: Path):
    if getattr(args, "asr_command", None):
        return CommandTranscriber(args.asr_command.split())
    alpha = Path(args.alphabet) if args.alphabet else corpus_dir / "alphabet.npy"
    return synth.TemplateTranscriber(synth.load_alphabet(alpha))


def _load_codec(path) -> Codec:
    if not path:
        raise UsageError("--checkpoint is required")
    if not Path(path).exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return Codec.load(path)


def _read_input_mel(path: Path, cfg: dsp.MelConfig) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == dsp.LOGMEL_MAGIC:
        return dsp.read_logmel(path)
    return dsp.log_mel(dsp.read_wave(path), cfg)


def cmd_synth_gen(args) -> int:
    cfg = build(SynthConfig, load_config(args, SECTIONS["synth-gen"]))
    alphabet = synth.make_alphabet(cfg.n_symbols, cfg.n_mels, separation=cfg.separation,
                                   seed=cfg.alphabet_seed)
    corpus = synth.gen_corpus(cfg.n_utts, (cfg.min_len, cfg.max_len), alphabet, cfg.noise, cfg.seed)
    out = Path(args.out)
    manifest = synth.save_corpus(out, corpus)
    synth.save_alphabet(out / "alphabet.npy", alphabet)
    print(f"wrote {len(corpus)} utterances to {manifest}")
    return 0


def cmd_train_stage1(args) -> int:
    values = load_config(args, SECTIONS["train-stage1"])
    model = Codec(build(CodecConfig, values))
    cfg = build(Stage1Config, values)
    corpus = synth.load_corpus(args.corpus)
    with _open_log(args) as log:
        losses = train_stage1(model, corpus, cfg, log=log)
    model.save(args.checkpoint)
    print(f"stage 1: {len(losses)} steps, final loss {losses[-1]:.4f}")
    return 0


def cmd_train_stage2(args) -> int:
    cfg = build(Stage2Config, load_config(args, SECTIONS["train-stage2"]))
    model = _load_codec(args.init)
    corpus = synth.load_corpus(args.corpus)
    tr = _transcriber(args, Path(args.corpus))
    with _open_log(args) as log:
        history = train_stage2(model, corpus, cfg, tr, log=log)
    model.save(args.checkpoint)
    print(f"stage 2: {len(history)} steps, final mean reward {history[-1].mean_reward:.4f}")
    return 0


def cmd_encode(args) -> int:
    cfg = build(dsp.MelConfig, load_config(args, SECTIONS["encode"]))
    model = _load_codec(args.checkpoint)
    mel = _read_input_mel(Path(args.input), cfg)
    if mel.shape[1] != model.cfg.n_mels:
        raise dsp.FormatError(f"input has {mel.shape[1]} mel bins, codec expects {model.cfg.n_mels}")
    data = bitstream.pack(model.encode_mel(mel))
    Path(args.output).write_bytes(data)
    print(f"{mel.shape[0]} mel frames -> {len(data)} bytes")
    return 0


def cmd_decode(args) -> int:
    model = _load_codec(args.checkpoint)
    codes = bitstream.unpack(Path(args.input).read_bytes())
    dsp.write_logmel(args.output, model.decode_codes(codes))
    return 0


def cmd_eval_wer(args) -> int:
    if args.bypass_codec == bool(args.checkpoint):
        raise UsageError("give exactly one of --checkpoint or --bypass-codec")
    model = None if args.bypass_codec else _load_codec(args.checkpoint)
    corpus = synth.load_corpus(args.corpus)
    res = evaluate(model, corpus, _transcriber(args, Path(args.corpus)))
    for i, w in enumerate(res.per_utterance):
        print(f"utt{i:05d}\t{w:.6f}")
    print(f"mean_wer\t{res.wer:.6f}")
    print(f"mean_mel_l1\t{res.mel_l1:.6f}")
    return 0


class _NullLog:
    def __enter__(self):
        return None

    def __exit__(self, *exc):
        return False


def _open_log(args):
    return open(args.log, "w", encoding="utf-8") if args.log else _NullLog()


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def make_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rlfsq", description="Low-bitrate speech token codec tools.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, steps=False, seed=False):
        sp.add_argument("--config", help="key = value file")
        if steps:
            sp.add_argument("--steps", type=int)
        if seed:
            sp.add_argument("--seed", type=int)

    sp = sub.add_parser("synth-gen", help="generate a synthetic symbol corpus")
    common(sp, seed=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_synth_gen)

    sp = sub.add_parser("train-stage1", help="train encoder, quantizer and decoder")
    common(sp, steps=True, seed=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--checkpoint", required=True, help="output checkpoint")
    sp.add_argument("--log")
    sp.set_defaults(func=cmd_train_stage1)

    sp = sub.add_parser("train-stage2", help="GRPO fine-tuning of the encoder")
    common(sp, steps=True, seed=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--init", required=True, help="stage 1 checkpoint")
    sp.add_argument("--checkpoint", required=True, help="output checkpoint")
    sp.add_argument("--alphabet")
    sp.add_argument("--asr-command", help="external transcriber; called with a .clmf path")
    sp.add_argument("--log")
    sp.set_defaults(func=cmd_train_stage2)

    sp = sub.add_parser("encode", help="waveform or LogMel file to .clc1")
    common(sp)
    sp.add_argument("--checkpoint")
    sp.add_argument("input")
    sp.add_argument("output")
    sp.set_defaults(func=cmd_encode)

    sp = sub.add_parser("decode", help=".clc1 to LogMel file")
    common(sp)
    sp.add_argument("--checkpoint")
    sp.add_argument("input")
    sp.add_argument("output")
    sp.set_defaults(func=cmd_decode)

    sp = sub.add_parser("eval-wer", help="mean WER of reconstructions on a corpus")
    common(sp)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--checkpoint")
    sp.add_argument("--bypass-codec", action="store_true")
    sp.add_argument("--alphabet")
    sp.add_argument("--asr-command")
    sp.set_defaults(func=cmd_eval_wer)
    return p


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        if args.config and not SECTIONS[args.command]:
            raise UsageError(f"{args.command} takes no config keys")
        return args.func(args)
    except UsageError as exc:
        print(f"rlfsq: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"rlfsq: config error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except bitstream.BitstreamError as exc:
        print(f"rlfsq: malformed bitstream: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as exc:
        print(f"rlfsq: missing file: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TranscriberError as exc:
        print(f"rlfsq: transcriber failed: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (dsp.FormatError, ValueError, OSError) as exc:
        print(f"rlfsq: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
