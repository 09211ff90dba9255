"""Command-line surface.

    lipsynth gendata    --spec corpus.cfg --out data/
    lipsynth train      --config run.cfg --data data/manifest.jsonl --out run/
    lipsynth synthesize --checkpoint run/final.ckpt --video clip.frames --out-wav out.wav
    lipsynth evaluate   --manifest data/manifest.jsonl --hyp-dir synth/ --report report.jsonl
    lipsynth gradcheck
    lipsynth inspect    path [path ...]

Config files are `key = value` lines (JSON values); train configs
namespace keys as model.* / train.*.  CLI --set overrides file values.
Exit codes: 0 ok, 2 config error, 3 IO/data error, 4 non-finite loss,
5 strict synthesis hit the max-step fallback, 6 gradient check failed.
"""

from __future__ import annotations

import argparse
import hashlib
import sys
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import dsp, metrics
from .config import load_config, parse_config_text
from .errors import ConfigError, DataError, LipsynthError, NonFiniteError
from .model import ModelConfig, SpeechSynthesizer
from .tensor import load_archive
from .train import TrainConfig, fit, load_train_checkpoint

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NONFINITE = 4
EXIT_STRICT_MAXSTEPS = 5
EXIT_GRADCHECK = 6


def _apply_sets(values: dict, sets: list[str]) -> dict:
    for item in sets or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        values.update(parse_config_text(item))
    return values


def _split_namespaced(values: dict) -> tuple[dict, dict]:
    model_d, train_d = {}, {}
    for key, v in values.items():
        scope, _, name = key.partition(".")
        if scope == "model":
            model_d[name] = v
        elif scope == "train":
            train_d[name] = v
        else:
            raise ConfigError(f"config keys must be model.* or train.*, got {key!r}")
    return model_d, train_d


def load_any_model(path) -> SpeechSynthesizer:
    """Accepts either a bare model checkpoint or a training checkpoint."""
    _, meta = load_archive(path)
    if meta.get("format") == "lipsynth-model":
        return SpeechSynthesizer.load(path)
    if meta.get("format") == "lipsynth-train":
        model, _, _, _, _ = load_train_checkpoint(path)
        return model
    raise ConfigError(f"{path}: not a recognized checkpoint")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gendata(args) -> int:
    values = load_config(args.spec) if args.spec else {}
    _apply_sets(values, args.set)
    spec = data_mod.SynthSpec.from_dict(values)
    manifest = data_mod.synth_generate(spec, args.out)
    records = data_mod.load_manifest(manifest)
    total = sum(r.duration for r in records)
    print(f"wrote {len(records)} clips, {total:.2f} s total -> {manifest}")
    return EXIT_OK


def cmd_train(args) -> int:
    values = load_config(args.config) if args.config else {}
    _apply_sets(values, args.set)
    model_d, train_d = _split_namespaced(values)
    model_cfg = ModelConfig.from_dict(model_d)
    tcfg = TrainConfig.from_dict(train_d)
    if args.fine_tune:
        tcfg.fine_tune = True
    records = data_mod.load_manifest(args.data)
    if not records:
        raise DataError(f"{args.data}: manifest lists no clips")
    val_records = data_mod.load_manifest(args.val_data) if args.val_data else None
    init_from = args.init_from
    resume = args.resume
    if args.fine_tune and resume and not init_from:
        # fine-tuning warm-starts parameters but runs a fresh schedule
        init_from, resume = resume, None
    model, ckpt = fit(records, model_cfg, tcfg, args.out,
                      val_records=val_records, resume=resume,
                      init_from=init_from, override_config=args.override_config,
                      quiet=args.quiet)
    print(f"finished at step {tcfg.total_steps}; final checkpoint {ckpt}")
    return EXIT_OK


def cmd_synthesize(args) -> int:
    model = load_any_model(args.checkpoint).eval()
    raw = data_mod.read_frames(args.video)
    clip = data_mod.frames_to_model_input(raw, model.cfg.input_channels)
    out = model.infer(clip)
    print(f"decoded {out.o_post.shape[0]} frames, stop_reason={out.stop_reason}")
    if args.out_mel:
        dsp.write_mel(args.out_mel, out.o_post.data)
    if args.out_alignment:
        np.save(args.out_alignment, out.alignments)
    stft_cfg = dsp.StftConfig()
    fb = dsp.mel_filterbank(model.cfg.n_mels, stft_cfg)
    magnitude = dsp.mel_to_linear(np.exp(out.o_post.data.astype(np.float64)), fb)
    audio = dsp.griffin_lim(magnitude, stft_cfg, iters=args.iters)
    dsp.write_wav(args.out_wav, audio)
    print(f"wrote {args.out_wav} ({audio.duration:.2f} s at {audio.sample_rate} Hz)")
    if args.strict and out.stop_reason == "max-steps":
        print("error: decoder hit the max-step fallback", file=sys.stderr)
        return EXIT_STRICT_MAXSTEPS
    return EXIT_OK


def cmd_evaluate(args) -> int:
    records = data_mod.load_manifest(args.manifest)
    hyp_dir = Path(args.hyp_dir)
    stft_cfg = dsp.StftConfig()
    fb = dsp.mel_filterbank(cfg=stft_cfg)
    rows = []
    missing = 0
    for rec in records:
        hyp_wav = hyp_dir / f"{rec.id}.wav"
        if not hyp_wav.exists():
            rows.append({"clip_id": rec.id, "error": f"missing hypothesis {hyp_wav}"})
            missing += 1
            continue
        try:
            ref = dsp.normalize(dsp.read_wav(rec.audio_path))
            hyp = dsp.normalize(dsp.read_wav(hyp_wav))
            row = {
                "clip_id": rec.id,
                "estoi": metrics.estoi(ref, hyp),
                "mel_mse": metrics.mel_mse(dsp.log_mel(ref, stft_cfg, fb),
                                           dsp.log_mel(hyp, stft_cfg, fb)),
                "wer": None,
                "cer": None,
            }
            hyp_txt = hyp_dir / f"{rec.id}.txt"
            if rec.transcript and hyp_txt.exists():
                hyp_transcript = hyp_txt.read_text(encoding="utf-8").strip()
                row["wer"] = metrics.wer_cer(rec.transcript, hyp_transcript, "word")
                row["cer"] = metrics.wer_cer(rec.transcript, hyp_transcript, "char")
            rows.append(row)
        except LipsynthError as exc:
            rows.append({"clip_id": rec.id, "error": str(exc)})
            missing += 1
    summary = metrics.write_report(args.report, rows)
    print(f"evaluated {len(rows) - missing}/{len(rows)} clips -> {args.report}")
    if summary["estoi"] is not None:
        print(f"mean estoi {summary['estoi']:.4f}  mean mel_mse {summary['mel_mse']:.4f}")
    if missing:
        print(f"warning: {missing} clip(s) failed", file=sys.stderr)
        if args.strict:
            return EXIT_IO
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradsuite import run_suite
    rows = run_suite(corrupt=args.corrupt)
    width = max(len(r.name) for r in rows)
    failed = []
    for r in rows:
        status = "pass" if r.passed else "FAIL"
        print(f"{r.name:<{width}}  max_rel_err={r.error:.3e}  tol={r.tolerance:.0e}  {status}")
        if not r.passed:
            failed.append(r.name)
    if failed:
        print(f"error: gradient check failed for: {', '.join(failed)}", file=sys.stderr)
        return EXIT_GRADCHECK
    return EXIT_OK


def _describe(path: Path) -> str:
    raw = open(path, "rb").read(4)
    if raw == b"TARC":
        entries, meta = load_archive(path)
        n_params = sum(v.size for k, v in entries.items() if k.startswith("param/"))
        lines = [f"{path}: {meta.get('format', 'archive')} "
                 f"({len(entries)} entries, {n_params} weights)"]
        if "config_hash" in meta:
            lines.append(f"  config_hash {meta['config_hash'][:16]}...")
        return "\n".join(lines)
    if raw == data_mod.FRAME_MAGIC:
        t, h, w, c = data_mod.frame_container_header(path)
        return f"{path}: frame container {t} x {h} x {w} x {c} (T,H,W,C)"
    if raw == dsp.MEL_MAGIC:
        mel = dsp.read_mel(path)
        return (f"{path}: mel spectrogram {mel.shape[0]} x {mel.shape[1]}, "
                f"range [{mel.min():.2f}, {mel.max():.2f}]")
    if raw == b"RIFF":
        sig = dsp.read_wav(path)
        digest = hashlib.sha256(open(path, "rb").read()).hexdigest()[:12]
        return (f"{path}: WAV {sig.duration:.2f} s at {sig.sample_rate} Hz, "
                f"peak {np.abs(sig.samples).max():.3f}, sha256 {digest}")
    try:
        records = data_mod.load_manifest(path, validate=False)
        total = sum(r.duration for r in records)
        return f"{path}: manifest with {len(records)} clips, {total:.2f} s total"
    except (DataError, UnicodeDecodeError):
        return f"{path}: unrecognized file"


def cmd_inspect(args) -> int:
    for p in args.paths:
        p = Path(p)
        if not p.exists():
            raise DataError(f"no such file: {p}")
        print(_describe(p))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser / entrypoint
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lipsynth",
                                 description="video-to-speech synthesis toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gendata", help="generate a synthetic audio-visual corpus")
    g.add_argument("--spec", help="corpus spec config file")
    g.add_argument("--out", required=True)
    g.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a spec value")
    g.set_defaults(fn=cmd_gendata)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", help="model.*/train.* config file")
    t.add_argument("--data", required=True, help="training manifest")
    t.add_argument("--val-data", help="validation manifest")
    t.add_argument("--out", required=True)
    t.add_argument("--resume", help="training checkpoint to continue from")
    t.add_argument("--init-from", help="checkpoint to warm-start parameters from")
    t.add_argument("--fine-tune", action="store_true",
                   help="10x smaller learning rate; with --resume, warm-start only")
    t.add_argument("--override-config", action="store_true",
                   help="allow checkpoint/model config hash mismatch")
    t.add_argument("--set", action="append", metavar="KEY=VALUE")
    t.add_argument("--quiet", action="store_true", default=False)
    t.set_defaults(fn=cmd_train)

    s = sub.add_parser("synthesize", help="video -> mel -> waveform")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--video", required=True, help="frame container")
    s.add_argument("--out-wav", required=True)
    s.add_argument("--out-mel")
    s.add_argument("--out-alignment", help=".npy attention matrix dump")
    s.add_argument("--iters", type=int, default=60, help="Griffin-Lim iterations")
    s.add_argument("--strict", action="store_true",
                   help="fail if decoding hits the max-step fallback")
    s.set_defaults(fn=cmd_synthesize)

    e = sub.add_parser("evaluate", help="score hypothesis audio against a manifest")
    e.add_argument("--manifest", required=True)
    e.add_argument("--hyp-dir", required=True,
                   help="directory of <clip_id>.wav (+ optional <clip_id>.txt)")
    e.add_argument("--report", required=True)
    e.add_argument("--strict", action="store_true")
    e.set_defaults(fn=cmd_evaluate)

    c = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    c.add_argument("--corrupt", help=argparse.SUPPRESS)   # fault-injection test hook
    c.set_defaults(fn=cmd_gradcheck)

    i = sub.add_parser("inspect", help="summarize lipsynth files")
    i.add_argument("paths", nargs="+")
    i.set_defaults(fn=cmd_inspect)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NONFINITE
    except (DataError, OSError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
