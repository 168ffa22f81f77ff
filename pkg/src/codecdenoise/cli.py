"""``codecdenoise`` command line: one binary, one subcommand per workflow step.

Exit codes: 0 success, 1 runtime error, 2 usage or configuration error.
Logs go to stderr; tables and summaries go to stdout.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import sys
from collections import Counter
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .audio_io import synth_tone_mix, write_wav
from .checkpoint import Checkpoint, CheckpointFormatError, load_checkpoint, save_checkpoint
from .codec import CodecSpec, build_codec, pretrain_toy_codec, roundtrip_si_sdr
from .degrade import build_dataset, read_manifest
from .errors import ConfigError
from .gradcheck import run_suite
from .metrics import evaluate, write_report
from .trainer import denoise_file, load_pairs, model_from_checkpoint, train

log = logging.getLogger("codecdenoise")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON run config; flags override its values")
    p.add_argument("--threads", type=int, default=None, help="cap on BLAS threads")
    p.add_argument("--deterministic", action="store_true", help="force single-threaded numerics")
    p.add_argument("--log-level", default="INFO", help="logging level (default INFO)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="codecdenoise", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="chunk, degrade and split clean audio into a paired dataset")
    _common(p)
    p.add_argument("--clean-dir", action="append", type=Path, help="clean audio directory (repeatable)")
    p.add_argument("--noise-dir", action="append", type=Path, help="external noise directory (repeatable)")
    p.add_argument("--rir-dir", action="append", type=Path, help="room impulse response directory (repeatable)")
    p.add_argument("--tones", type=int, default=0, help="first synthesize this many tone-mix clean files")
    p.add_argument("--tone-seconds", type=float, default=2.0, help="length of each synthesized tone file")
    p.add_argument("--kinds", nargs="+", help="degradation kinds to draw from")
    p.add_argument("--variants", type=int, help="degraded versions per clean chunk")
    p.add_argument("--out", type=Path, required=True, help="output dataset directory")
    p.add_argument("--seed", type=int, help="global seed")

    p = sub.add_parser("pretrain-codec", help="pretrain the toy conv codec on clean training chunks")
    _common(p)
    p.add_argument("--data", type=Path, required=True, help="dataset directory holding manifest.jsonl")
    p.add_argument("--out", type=Path, required=True, help="codec checkpoint to write")
    p.add_argument("--steps", type=int, help="optimizer steps")
    p.add_argument("--seed", type=int, help="initialization and crop seed")

    p = sub.add_parser("train", help="train the latent U-Net denoiser")
    _common(p)
    p.add_argument("--data", type=Path, required=True, help="dataset directory holding manifest.jsonl")
    p.add_argument("--out", type=Path, required=True, help="run directory for checkpoints and curves")
    p.add_argument("--codec", type=Path, help="pretrained codec checkpoint (ToyConv)")
    p.add_argument("--resume", type=Path, help="continue from this run checkpoint")
    p.add_argument("--epochs", type=int, help="number of epochs")
    p.add_argument("--batch-size", type=int, help="batch size")
    p.add_argument("--lr", type=float, help="initial learning rate")
    p.add_argument("--seed", type=int, help="initialization and shuffle seed")

    p = sub.add_parser("denoise", help="denoise one WAV file")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True, help="trained model checkpoint")
    p.add_argument("--in", dest="wav_in", type=Path, required=True, help="input WAV")
    p.add_argument("--out", type=Path, required=True, help="output WAV")

    p = sub.add_parser("evaluate", help="score a test subset and print a summary table")
    _common(p)
    p.add_argument("--data", type=Path, required=True, help="dataset directory holding manifest.jsonl")
    p.add_argument("--checkpoint", type=Path, help="trained model; omit to score the noisy inputs only")
    p.add_argument("--n", type=int, help="subset size")
    p.add_argument("--seed", type=int, help="subset seed")
    p.add_argument("--json", type=Path, help="write the full report here")
    p.add_argument("--csv", type=Path, help="write per-file rows here")

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and a tiny U-Net")
    _common(p)
    p.add_argument("--h", type=float, default=1e-4, help="finite-difference step")
    p.add_argument("--tol", type=float, default=1e-4, help="maximum relative error")

    p = sub.add_parser("inspect-manifest", help="validate a manifest and print counts")
    _common(p)
    p.add_argument("manifest", type=Path, help="manifest.jsonl or a dataset directory")
    return parser


def _manifest_path(path: Path) -> Path:
    return path / "manifest.jsonl" if path.is_dir() else path


def _print_counts(entries) -> None:
    splits = Counter(e.split for e in entries)
    kinds = Counter(r.kind for e in entries for r in e.degradations)
    print(f"entries: {len(entries)}")
    for s in ("train", "val", "test"):
        print(f"  {s:5s} {splits.get(s, 0)}")
    print("degradations:")
    for k, n in sorted(kinds.items()):
        print(f"  {k:16s} {n}")


def cmd_synth_data(args, cfg) -> int:
    out = args.out
    if args.tones:
        tone_dir = out / "tones"
        tone_dir.mkdir(parents=True, exist_ok=True)
        seed = cfg["dataset"]["global_seed"]
        for i in range(args.tones):
            wave = synth_tone_mix(seed * 1_000_003 + i, args.tone_seconds, cfg["dataset"]["sample_rate"])
            write_wav(tone_dir / f"tone_{i:05d}.wav", wave)
        cfg["dataset"]["clean_dirs"] = list(cfg["dataset"]["clean_dirs"]) + [str(tone_dir)]
    dcfg = cfgmod.dataset_config(cfg)
    if not dcfg.clean_dirs:
        raise ConfigError("no clean directories given (use --clean-dir or --tones)")
    entries = build_dataset(dcfg, out, threads=args.threads or 1)
    _print_counts(entries)
    return 0


def cmd_pretrain_codec(args, cfg) -> int:
    entries = [e for e in read_manifest(_manifest_path(args.data)) if e.split == "train"]
    pairs = load_pairs(entries, args.data)
    spec = cfgmod.codec_spec(cfg)
    if spec.kind != "ToyConv":
        raise ConfigError("pretrain-codec needs codec.kind = ToyConv")
    codec, report = pretrain_toy_codec(list(pairs.clean), cfgmod.codec_train_config(cfg), spec)
    held = [e for e in read_manifest(_manifest_path(args.data)) if e.split == "val"]
    rt = roundtrip_si_sdr(codec, load_pairs(held, args.data).clean) if held else float("nan")
    ckpt = Checkpoint(
        config={"codec": {"kind": spec.kind, "hop": spec.hop, "c_lat": spec.c_lat, "sample_rate": spec.sample_rate, "rvq": None}},
        tensors={k: v.data for k, v in codec.params.items()},
        state={"l1_before": report.l1_before, "l1_after": report.l1_after, "roundtrip_si_sdr_db": rt},
    )
    args.out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(args.out, ckpt)
    print(f"reconstruction L1 {report.l1_before:.5f} -> {report.l1_after:.5f}; held-out round-trip SI-SDR {rt:.2f} dB")
    return 0


def _load_codec(path: Path | None, cfg):
    spec = cfgmod.codec_spec(cfg)
    if path is None:
        if spec.kind == "ToyConv":
            raise ConfigError("codec.kind = ToyConv needs --codec from pretrain-codec")
        return build_codec(spec)
    ck = load_checkpoint(path)
    return build_codec(CodecSpec(**{k: v for k, v in ck.config["codec"].items() if k != "rvq"}), ck.tensors)


def cmd_train(args, cfg) -> int:
    entries = read_manifest(_manifest_path(args.data))
    tr = load_pairs([e for e in entries if e.split == "train"], args.data)
    va = load_pairs([e for e in entries if e.split == "val"], args.data)
    codec = _load_codec(args.codec, cfg)
    ucfg = cfgmod.unet_config(cfg, codec.c_lat)
    tcfg = cfgmod.train_config(cfg)
    result = train(tr, va, codec, ucfg, tcfg, out_dir=args.out, resume=args.resume, extra_config={"run": cfg})
    last = result.history[-1]
    print(f"epochs {len(result.history)}; final train {last['train_total']:.5f} val {last['val_total']:.5f}")
    return 0


def cmd_denoise(args, cfg) -> int:
    y = denoise_file(args.checkpoint, args.wav_in, args.out)
    print(f"wrote {args.out} ({len(y)} samples at {y.sample_rate} Hz)")
    return 0


def cmd_evaluate(args, cfg) -> int:
    entries = [e for e in read_manifest(_manifest_path(args.data)) if e.split == "test"]
    model = model_from_checkpoint(load_checkpoint(args.checkpoint)) if args.checkpoint else None
    ev = cfg["eval"]
    report = evaluate(entries, args.data, model, n=ev["n"], seed=ev["seed"])
    print(report.table())
    if report.errors:
        print(f"{len(report.errors)} file(s) failed and were excluded")
    if args.json:
        write_report(report, args.json)
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            conds = [c for c in ("noisy", "denoised") if c in report.means]
            w.writerow(["id"] + [f"{c}_{m}" for c in conds for m in ("si_sdr_db", "stoi", "snr_db")])
            for r in report.rows:
                w.writerow([r["id"]] + [r[c][m] for c in conds for m in ("si_sdr_db", "stoi", "snr_db")])
    return 0


def cmd_gradcheck(args, cfg) -> int:
    results = run_suite(h=args.h, tol=args.tol)
    for r in results:
        print(f"{'ok  ' if r.passed else 'FAIL'} {r.name:28s} max rel err {r.max_rel_error:.2e} over {r.n_checked} coords")
    failed = [r.name for r in results if not r.passed]
    if failed:
        log.error("gradient check failed for: %s", ", ".join(failed))
        return 1
    return 0


def cmd_inspect_manifest(args, cfg) -> int:
    entries = read_manifest(_manifest_path(args.manifest))
    _print_counts(entries)
    snrs = [e.snr_db for e in entries if e.snr_db is not None]
    if snrs:
        print(f"snr_db: min {min(snrs):.2f} mean {np.mean(snrs):.2f} max {max(snrs):.2f}")
    return 0


COMMANDS = {
    "synth-data": cmd_synth_data,
    "pretrain-codec": cmd_pretrain_codec,
    "train": cmd_train,
    "denoise": cmd_denoise,
    "evaluate": cmd_evaluate,
    "gradcheck": cmd_gradcheck,
    "inspect-manifest": cmd_inspect_manifest,
}

# flag -> dotted config key
OVERRIDES = {
    "seed": {"synth-data": "dataset.global_seed", "pretrain-codec": "codec.pretrain_seed", "train": "trainer.seed", "evaluate": "eval.seed"},
    "kinds": {"synth-data": "dataset.kinds"},
    "variants": {"synth-data": "dataset.variants_per_chunk"},
    "steps": {"pretrain-codec": "codec.pretrain_steps"},
    "epochs": {"train": "trainer.epochs"},
    "batch_size": {"train": "trainer.batch_size"},
    "lr": {"train": "trainer.lr"},
    "n": {"evaluate": "eval.n"},
}


def _resolve_config(args) -> dict:
    overrides = {}
    for flag, targets in OVERRIDES.items():
        if args.command in targets and getattr(args, flag, None) is not None:
            overrides[targets[args.command]] = getattr(args, flag)
    for flag, key in (("clean_dir", "clean_dirs"), ("noise_dir", "noise_dirs"), ("rir_dir", "rir_dirs")):
        if getattr(args, flag, None):
            overrides[f"dataset.{key}"] = [str(p) for p in getattr(args, flag)]
    return cfgmod.load_config(args.config, overrides)


def _thread_limit(args):
    n = 1 if args.deterministic else args.threads
    if n is None:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _resolve_config(args)
        log.info("resolved config: %s", json.dumps(cfg, sort_keys=True))
        with _thread_limit(args):
            return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return 2
    except (CheckpointFormatError, FileNotFoundError) as exc:
        log.error("%s", exc)
        return 1
    except Exception as exc:  # noqa: BLE001  top-level boundary
        log.error("%s: %s", type(exc).__name__, exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
