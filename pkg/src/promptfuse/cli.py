"""Command-line entry point.

Exit codes: 0 success, 1 validation/usage error, 2 I/O error. Flags override
values from a --config JSON file, which overrides built-in defaults. The
PROMPTFUSE_THREADS environment variable caps worker threads.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .audio import log_spectrogram, read_wav, spectrogram_to_csv
from .errors import DataError, ValidationError
from .manifest import (
    FewShotSpec,
    class_distribution,
    few_shot_sample,
    load_manifest,
    make_splits,
    write_manifest,
    DatasetSplit,
)
from .training import (
    TrainConfig,
    ablate,
    ablation_to_csv,
    apply_override,
    builtin_grid,
    evaluate,
    gradient_check,
    train,
    write_metrics_csv,
)

import dataclasses


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2; the contract wants 1
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with TrainConfig fields")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--frames", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--text-tokens", type=int)
    p.add_argument("--video-tokens", type=int)
    p.add_argument("--text-depth", type=int)
    p.add_argument("--video-depth", type=int)
    p.add_argument("--no-audio", action="store_true", default=None)
    p.add_argument("--no-video-prompts", action="store_true", default=None)
    p.add_argument("--no-text-prompts", action="store_true", default=None)


def _merge(dst: dict, src: dict) -> dict:
    for key, value in src.items():
        if isinstance(value, dict) and isinstance(dst.get(key), dict):
            _merge(dst[key], value)
        else:
            dst[key] = value
    return dst


def _config_from_args(args) -> TrainConfig:
    base = TrainConfig().to_dict()
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise DataError(f"config file not found: {path}")
        try:
            _merge(base, json.loads(path.read_text(encoding="utf-8")))
        except json.JSONDecodeError as exc:
            raise ValidationError(f"bad config JSON: {exc}") from exc
    cfg = TrainConfig.from_dict(base)
    overrides = {}
    for flag, key in (
        ("seed", "seed"),
        ("epochs", "epochs"),
        ("lr", "learning_rate"),
        ("frames", "frames_per_video"),
        ("batch_size", "batch_size"),
        ("text_tokens", "prompt.text_tokens"),
        ("video_tokens", "prompt.video_tokens"),
        ("text_depth", "prompt.text_depth"),
        ("video_depth", "prompt.video_depth"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, "no_audio", None):
        overrides["audio_enabled"] = False
    if getattr(args, "no_video_prompts", None):
        overrides["prompt.enabled_video"] = False
    if getattr(args, "no_text_prompts", None):
        overrides["prompt.enabled_text"] = False
    if getattr(args, "k", None) is not None:
        overrides["few_shot"] = FewShotSpec(k=args.k, seed=overrides.get("seed", cfg.seed))
    if overrides:
        few_shot = overrides.pop("few_shot", None)
        cfg = apply_override(cfg, overrides)
        if few_shot is not None:
            cfg = dataclasses.replace(cfg, few_shot=few_shot)
    return cfg


def _cmd_validate(args) -> int:
    entries = load_manifest(args.manifest)
    counts = class_distribution(entries)
    for label in sorted(counts):
        print(f"{label}: {counts[label]}")
    print(f"total: {len(entries)}")
    return 0


def _cmd_split(args) -> int:
    entries = load_manifest(args.manifest)
    train_split, test_split = make_splits(entries, args.test_fraction, args.seed or 0)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, split in (("train", train_split), ("test", test_split)):
        tagged = [dataclasses.replace(e, split=name) for e in split.entries]
        write_manifest(out / f"{name}.jsonl", tagged)
    print(f"train: {len(train_split)} test: {len(test_split)}")
    return 0


def _cmd_spectrogram(args) -> int:
    w = read_wav(args.audio)
    spec = log_spectrogram(w)
    spectrogram_to_csv(spec, args.out)
    print(f"{spec.values.shape[0]} bins x {spec.values.shape[1]} frames -> {args.out}")
    return 0


def _cmd_fewshot(args) -> int:
    entries = load_manifest(args.manifest)
    if entries and all(e.split is not None for e in entries):
        pool = [e for e in entries if e.split == "train"]
    else:
        pool = entries
    subset = few_shot_sample(DatasetSplit.from_entries(pool), FewShotSpec(k=args.k, seed=args.seed or 0))
    write_manifest(args.out, subset.entries)
    counts = class_distribution(subset.entries)
    print(" ".join(f"{label}={counts[label]}" for label in sorted(counts)))
    return 0


def _cmd_train(args) -> int:
    cfg = _config_from_args(args)
    checkpoint, records = train(cfg, args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "checkpoint.pfck").write_bytes(checkpoint)
    write_metrics_csv(records, out / "metrics.csv")
    final = [r for r in records if r.split == "test"] or records
    print(f"final {final[-1].split} accuracy: {final[-1].accuracy:.2f}% -> {out}")
    return 0


def _cmd_eval(args) -> int:
    record = evaluate(args.checkpoint, args.manifest, args.split)
    if args.out:
        write_metrics_csv([record], args.out)
    print(f"{record.split} loss={record.loss:.6f} accuracy={record.accuracy:.2f}%")
    return 0


def _cmd_ablate(args) -> int:
    cfg = _config_from_args(args)
    grid = builtin_grid(args.axis, frozen_prompts=bool(args.frozen_prompts), fewshot_seed=cfg.seed)
    results = ablate(grid, cfg, args.manifest)
    text = ablation_to_csv(grid, cfg, results)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    print(text, end="")
    return 0


def _cmd_gradcheck(args) -> int:
    cfg = _config_from_args(args)
    err = gradient_check(cfg, epsilon=args.epsilon)
    print(f"max relative gradient error: {err:.3e}")
    return 0 if err < args.tolerance else 1


def build_parser() -> _Parser:
    parser = _Parser(prog="promptfuse")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate-manifest", help="parse a manifest and print class counts")
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=_cmd_validate)

    p = sub.add_parser("split", help="write stratified train/test manifests")
    p.add_argument("--manifest", required=True)
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_split)

    p = sub.add_parser("spectrogram", help="dump a WAV's log-power spectrogram as CSV")
    p.add_argument("audio")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_spectrogram)

    p = sub.add_parser("fewshot", help="draw a k-per-class subset of the train split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_fewshot)

    p = sub.add_parser("train", help="train prompts + projection, write checkpoint and metrics")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, help="few-shot samples per class")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", choices=("train", "test", "all"), default="test")
    p.add_argument("--out")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ablate", help="run a one-axis ablation sweep, emit CSV")
    p.add_argument("--manifest", required=True)
    p.add_argument("--axis", choices=("modality", "tokens", "depth", "fewshot"), required=True)
    p.add_argument("--out")
    p.add_argument("--frozen-prompts", action="store_true",
                   help="freeze rather than remove prompts in 'not learnable' rows")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("gradcheck", help="compare autograd against central differences")
    p.add_argument("--epsilon", type=float, default=1e-3)
    p.add_argument("--tolerance", type=float, default=1e-3)
    _add_config_flags(p)
    p.set_defaults(func=_cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    threads = os.environ.get("PROMPTFUSE_THREADS")
    if threads:
        try:
            import torch

            torch.set_num_threads(max(1, int(threads)))
        except ValueError:
            print(f"ignoring bad PROMPTFUSE_THREADS={threads!r}", file=sys.stderr)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except SystemExit as exc:
        return int(exc.code or 0)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
