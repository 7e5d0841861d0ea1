"""Command-line entry points: ``upn <command> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from types import SimpleNamespace

import numpy as np

from . import toy
from .audio import read_wav, write_wav
from .conditioning import read_schedule_file
from .datagen import cleanup_corpus, generate_dataset, read_manifest
from .dsp import DEFAULT_CONFIG
from .embedder import (augment_enrollment, embed, load_embedder, read_embedding_cache, save_embedder,
                       train_embedder, write_embedding_cache)
from .harness import EvalReport, enhance, evaluate, format_table, measure_rtf
from .net import load_params
from .postproc import compensate_delay
from .trainer import TrainConfig, prepare_segment, save_config, train

log = logging.getLogger("upn")


class UsageError(Exception):
    pass


def _load_config(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8")) if path else {}


def _clips_from_dir(root) -> dict:
    """``root/<speaker>/*.wav`` -> {speaker: [AudioBuffer, ...]}."""
    root = Path(root)
    out = {}
    for d in sorted(p for p in root.iterdir() if p.is_dir()):
        wavs = sorted(d.glob("*.wav"))
        if wavs:
            out[d.name] = [read_wav(w) for w in wavs]
    if not out:
        raise UsageError(f"no speaker directories with WAV files under {root}")
    return out


def _embedding_for(args):
    """Embedding from ``--embedding`` cache or ``--enroll`` audio; None if neither is given."""
    if getattr(args, "embedding", None):
        cache = read_embedding_cache(args.embedding)
        key = args.speaker or next(iter(cache))
        if key not in cache:
            raise UsageError(f"speaker {key!r} not in {args.embedding}")
        return cache[key]
    if args.enroll:
        if not args.embedder:
            raise UsageError("--enroll needs --embedder")
        return embed(load_embedder(args.embedder), read_wav(args.enroll))
    return None


# ---------------------------------------------------------------------------
# commands

def cmd_datagen(args):
    cfg = _load_config(args.config)
    out = Path(args.out)
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    if args.clips:
        clips = _clips_from_dir(args.clips)
        noises = [read_wav(p) for p in sorted(Path(args.noises).glob("*.wav"))] if args.noises else []
        if not noises:
            raise UsageError("--clips needs --noises with at least one WAV file")
        enrollment = {spk: c[0] for spk, c in clips.items()}
    else:
        corpus = toy.make_corpus(n_speakers=cfg.get("n_speakers", 8), seed=seed)
        clips, noises, enrollment = corpus.clips, corpus.noises, corpus.enrollment
    embedder = train_embedder([clips[s] for s in sorted(clips)], seed=seed)
    save_embedder(embedder, out / "embedder.npz")
    for spk, audio in enrollment.items():
        write_wav(out / "enroll" / f"{spk}.wav", audio, float32=True)
    records = generate_dataset(clips, noises, out,
                               segments_per_speaker=args.segments or cfg.get("segments_per_speaker", 8),
                               duration_s=args.duration or cfg.get("duration_s", 10.0),
                               seed=seed, augment=args.augment or cfg.get("augment", False))
    print(f"wrote {len(records)} segments to {out}")


def cmd_cleanup(args):
    if not args.embedder:
        raise UsageError("cleanup needs --embedder")
    clips = _clips_from_dir(args.clips)
    kept, imap, report = cleanup_corpus(clips, load_embedder(args.embedder))
    result = {"interference_map": imap, "clips": report,
              "dropped": {s: len(clips[s]) - len(kept[s]) for s in clips}}
    text = json.dumps(result, indent=2)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    print(text)


def cmd_embed(args):
    if not args.embedder or not args.enroll:
        raise UsageError("embed needs --embedder and --enroll")
    model = load_embedder(args.embedder)
    audio = read_wav(args.enroll)
    spk = args.speaker or Path(args.enroll).stem
    entries = {spk: embed(model, audio)}
    for k, v in enumerate(augment_enrollment(audio, args.variants, rng_seed=args.seed or 0)
                          if args.variants else []):
        entries[f"{spk}/{k}"] = embed(model, v)
    if args.out:
        write_embedding_cache(args.out, entries)
    print(json.dumps({"speaker": spk, "embedding": entries[spk].round(6).tolist()}))


def cmd_train(args):
    data = Path(args.data)
    cfg = TrainConfig.from_file(args.config, seed=args.seed, epochs=args.epochs, mu=args.mu,
                                checkpoint_dir=args.out, learning_rate=args.lr,
                                time_budget_s=args.time_budget)
    embedder = load_embedder(args.embedder or data / "embedder.npz")
    records = read_manifest(data / "manifest.jsonl")
    variants = {}
    for spk in sorted({r.target_speaker for r in records}):
        enroll = read_wav(data / "enroll" / f"{spk}.wav")
        variants[spk] = np.array([embed(embedder, v) for v in augment_enrollment(enroll, 10, rng_seed=cfg.seed)])

    dataset = []
    for rec in records:
        t = SimpleNamespace(**{k: read_wav(data / rec.paths[k])
                               for k in ("mixture", "personalized_ref", "non_personalized_ref")})
        dataset.append(prepare_segment(rec.segment_id, t, variants[rec.target_speaker]))
    Path(args.out).mkdir(parents=True, exist_ok=True)
    save_config(cfg, Path(args.out) / "config.json")
    res = train(dataset, cfg, log_path=Path(args.out) / "train_log.jsonl")
    print(f"best validation loss {res.best_val:.4f}; checkpoints in {args.out}")


def cmd_enhance(args):
    if not args.model:
        raise UsageError("enhance needs --model")
    params = load_params(args.model)
    audio = read_wav(args.input)
    z = _embedding_for(args)
    if args.mode in ("pse", "schedule") and z is None:
        raise UsageError(f"mode {args.mode} needs --enroll (with --embedder) or --embedding")
    schedule = None
    if args.mode == "schedule":
        if not args.schedule:
            raise UsageError("mode schedule needs --schedule")
        schedule = read_schedule_file(args.schedule, DEFAULT_CONFIG.n_frames(len(audio)))
    out, _ = enhance(params, audio, z, args.mode, schedule)
    if args.compensate_delay:
        est, _ = compensate_delay(out, audio)
        out = np.concatenate([est, np.zeros(len(audio) - len(est))])
    write_wav(args.output, out, float32=args.float32)
    print(f"wrote {args.output}")


def cmd_eval(args):
    if not args.model:
        raise UsageError("eval needs --model")
    params = load_params(args.model)
    z = _embedding_for(args)
    if args.mode == "pse" and z is None:
        raise UsageError("mode pse needs --enroll (with --embedder) or --embedding")
    if args.mode == "schedule":
        raise UsageError("eval supports modes pse and nse")
    report = evaluate(params, read_wav(args.mixture), read_wav(args.reference), z, args.mode,
                      name=Path(args.mixture).stem)
    if args.rtf:
        report = EvalReport(**{**report.__dict__, "rtf": measure_rtf(params, 5.0)})
    print(report.to_json())
    print(format_table([report]), file=sys.stderr)


def cmd_bench(args):
    if not args.model:
        raise UsageError("bench needs --model")
    rtf = measure_rtf(load_params(args.model), args.duration, runs=args.runs, seed=args.seed or 0)
    print(json.dumps({"rtf": rtf, "duration_s": args.duration, "runs": args.runs}))


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="random seed")
    common.add_argument("--model", help="enhancer checkpoint")
    common.add_argument("--mode", choices=("pse", "nse", "schedule"), default="nse")
    common.add_argument("--schedule", help="schedule file (start_frame<TAB>flag per line)")
    common.add_argument("--enroll", help="enrollment WAV")
    common.add_argument("--embedder", help="speaker embedder (.npz)")
    common.add_argument("--embedding", help="embedding cache file")
    common.add_argument("--speaker", help="speaker id in the embedding cache")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="upn", description="Unified personalised / non-personalised enhancer")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("datagen", parents=[common], help="synthesize a training set")
    s.add_argument("--out", required=True)
    s.add_argument("--clips", help="directory of <speaker>/*.wav (default: toy corpus)")
    s.add_argument("--noises", help="directory of noise WAVs")
    s.add_argument("--segments", type=int, help="segments per speaker")
    s.add_argument("--duration", type=float, help="segment length in seconds")
    s.add_argument("--augment", action="store_true")
    s.set_defaults(func=cmd_datagen)

    s = sub.add_parser("cleanup", parents=[common], help="flag multi-speaker clips, map interferers")
    s.add_argument("--clips", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_cleanup)

    s = sub.add_parser("embed", parents=[common], help="embed enrollment audio")
    s.add_argument("--out", help="embedding cache to write")
    s.add_argument("--variants", type=int, default=0, help="also store N augmented variants")
    s.set_defaults(func=cmd_embed)

    s = sub.add_parser("train", parents=[common], help="train the enhancer")
    s.add_argument("--data", required=True, help="datagen output directory")
    s.add_argument("--out", required=True, help="checkpoint directory")
    s.add_argument("--epochs", type=int)
    s.add_argument("--mu", type=float)
    s.add_argument("--lr", type=float)
    s.add_argument("--time-budget", type=float, help="stop after this many seconds")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("enhance", parents=[common], help="enhance a WAV file")
    s.add_argument("input")
    s.add_argument("output")
    s.add_argument("--compensate-delay", action="store_true", help="remove the 30 ms processing delay")
    s.add_argument("--float32", action="store_true", help="write 32-bit float instead of 16-bit PCM")
    s.set_defaults(func=cmd_enhance)

    s = sub.add_parser("eval", parents=[common], help="score an enhanced mixture against a reference")
    s.add_argument("--mixture", required=True)
    s.add_argument("--reference", required=True)
    s.add_argument("--rtf", action="store_true", help="also measure the real-time factor")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("bench", parents=[common], help="measure the real-time factor")
    s.add_argument("--duration", type=float, default=10.0)
    s.add_argument("--runs", type=int, default=5)
    s.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        parser.error(str(exc))  # exits with status 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
