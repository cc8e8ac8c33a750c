"""Command-line entry point binding corpus synthesis, training,
separation, evaluation, and schedule export.

Exit codes: 0 success, 1 usage/configuration error, 2 runtime error.
Every random choice is controlled by --seed; reruns with identical
arguments overwrite their outputs identically.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import css as css_mod
from . import metrics, mixer, train as train_mod
from .dsp import StftConfig
from .losses import ShiftSchedule, lambda_weight
from .model import ModelConfig
from .wavio import read_wav, write_wav

CHECKPOINT_DIR_ENV = "TINYSEP_CHECKPOINT_DIR"


class UsageError(Exception):
    pass


def _keys(cls) -> list[str]:
    return [f.name for f in dataclasses.fields(cls)]


_TRAIN_KEYS = (
    ["model." + k for k in _keys(ModelConfig)]
    + ["optim." + k for k in _keys(train_mod.OptimConfig)]
    + ["stft." + k for k in _keys(StftConfig)]
    + ["segment_frames", "val_fraction", "dtype", "layer_map_variant", "stage1_steps"]
)
_SYNTH_KEYS = _keys(mixer.CorpusTemplate)
_SEPARATE_KEYS = ["stft." + k for k in _keys(StftConfig)] + [
    "css." + k for k in _keys(css_mod.CssConfig)
]


def _config_epilog(keys: list[str]) -> str:
    return "config keys (file or --set):\n  " + "\n  ".join(sorted(keys))


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file not found: {path}")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise UsageError(f"config file {path} is not valid JSON: {e}")
    if not isinstance(cfg, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    return cfg


def _apply_sets(cfg: dict, sets: list[str]) -> dict:
    for item in sets or []:
        if "=" not in item:
            raise UsageError(f"override {item!r} is not of the form key=value")
        key, _, raw = item.partition("=")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = cfg
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise UsageError(f"override key {key!r} conflicts with config")
        node[parts[-1]] = value
    return cfg


def _tupled(value):
    return tuple(_tupled(v) for v in value) if isinstance(value, list) else value


def _build(cls, d: dict, where: str):
    allowed = set(_keys(cls))
    for k in d:
        if k not in allowed:
            raise UsageError(f"unknown config key '{where}{k}'")
    try:
        return cls(**{k: _tupled(v) for k, v in d.items()})
    except (TypeError, ValueError) as e:
        raise UsageError(f"invalid {where.rstrip('.') or cls.__name__} config: {e}")


def _check_keys(cfg: dict, allowed_top: set[str], command: str) -> None:
    for k in cfg:
        if k not in allowed_top:
            raise UsageError(f"unknown config key '{k}' for {command}")


def _parallel_map(fn, items, workers: int) -> list:
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _train_pieces(cfg: dict, command: str, seed: int):
    _check_keys(
        cfg,
        {"model", "optim", "stft", "segment_frames", "val_fraction", "dtype",
         "layer_map_variant", "stage1_steps"},
        command,
    )
    optim_cfg = dict(cfg.get("optim", {}))
    optim_cfg.setdefault("seed", seed)
    return {
        "model": _build(ModelConfig, cfg.get("model", {}), "model."),
        "optim": _build(train_mod.OptimConfig, optim_cfg, "optim."),
        "stft": _build(StftConfig, cfg.get("stft", {}), "stft."),
        "segment_frames": int(cfg.get("segment_frames", 150)),
        "val_fraction": float(cfg.get("val_fraction", 0.1)),
        "dtype": str(cfg.get("dtype", "float32")),
        "layer_map_variant": str(cfg.get("layer_map_variant", "uniform")),
        "stage1_steps": cfg.get("stage1_steps"),
    }


def _out_dir(args, command: str) -> Path:
    out = args.out or os.environ.get(CHECKPOINT_DIR_ENV)
    if out is None:
        raise UsageError(
            f"{command} needs --out (or ${CHECKPOINT_DIR_ENV}) for checkpoints"
        )
    return Path(out)


def _cmd_synth(args) -> int:
    cfg = _apply_sets(_load_config(args.config), args.set)
    template = _build(mixer.CorpusTemplate, cfg, "")
    seeds = [args.seed ^ i for i in range(args.n)]
    samples = _parallel_map(
        lambda s: mixer.make_sample(template, not args.unlabeled, s),
        seeds,
        args.workers,
    )
    manifest = mixer.write_corpus(samples, args.out)
    ratios = [s.overlap_ratio for s in samples]
    print(f"wrote {args.n} samples to {manifest}")
    print(f"mean overlap ratio: {sum(ratios) / len(ratios):.3f}")
    return 0


def _run_and_report(manifest: train_mod.RunManifest) -> int:
    result = train_mod.run(manifest)
    print(f"mode: {manifest.mode}")
    print(f"checkpoint: {result.checkpoint}")
    print(f"validation loss: {result.val_loss:.6g}")
    return 0


def _cmd_train(args, mode: str) -> int:
    cfg = _apply_sets(_load_config(args.config), args.set)
    pieces = _train_pieces(cfg, mode, args.seed)
    manifest = train_mod.RunManifest(
        mode=mode,
        model=pieces["model"],
        optim=pieces["optim"],
        stft=pieces["stft"],
        labeled_corpus=args.corpus,
        checkpoint_dir=str(_out_dir(args, mode)),
        segment_frames=pieces["segment_frames"],
        val_fraction=pieces["val_fraction"],
        dtype=pieces["dtype"],
    )
    try:
        manifest.validate()
    except ValueError as e:
        raise UsageError(str(e))
    return _run_and_report(manifest)


def _cmd_distill(args) -> int:
    cfg = _apply_sets(_load_config(args.config), args.set)
    pieces = _train_pieces(cfg, "distill", args.seed)
    if args.mode == "unlabeled_lts_os" and args.unlabeled_corpus is None:
        raise UsageError("mode unlabeled_lts_os requires --unlabeled-corpus")
    total = pieces["optim"].total_steps
    schedule = train_mod.desk_schedule(total, k=args.k, t0=args.t0)
    labeled = args.corpus
    unlabeled = args.unlabeled_corpus
    manifest = train_mod.RunManifest(
        mode=args.mode,
        model=pieces["model"],
        optim=pieces["optim"],
        stft=pieces["stft"],
        schedule=schedule,
        labeled_corpus=labeled,
        unlabeled_corpus=unlabeled,
        teacher_checkpoint=args.teacher_checkpoint,
        student_init=args.student_init,
        checkpoint_dir=str(_out_dir(args, "distill")),
        segment_frames=pieces["segment_frames"],
        stage1_steps=(
            int(pieces["stage1_steps"]) if pieces["stage1_steps"] else args.stage1_steps
        ),
        layer_map_variant=pieces["layer_map_variant"],
        val_fraction=pieces["val_fraction"],
        dtype=pieces["dtype"],
    )
    try:
        manifest.validate()
    except ValueError as e:
        raise UsageError(str(e))
    return _run_and_report(manifest)


def _cmd_separate(args) -> int:
    cfg = _apply_sets(_load_config(args.config), args.set)
    _check_keys(cfg, {"stft", "css"}, "separate")
    stft_cfg = _build(StftConfig, cfg.get("stft", {}), "stft.")
    css_cfg = _build(css_mod.CssConfig, cfg.get("css", {}), "css.")
    model = train_mod.load_model(args.checkpoint)
    wave = read_wav(args.input)
    log: list = []
    sources = css_mod.separate_continuous(model, wave, css_cfg, stft_cfg, alignment_log=log)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.input).stem
    for i, src in enumerate(sources):
        path = out / f"{stem}_source{i}.wav"
        write_wav(path, src)
        print(f"wrote {path}")
    if args.trace:
        with open(args.trace, "w") as fh:
            for rec in log:
                fh.write(json.dumps(rec) + "\n")
        print(f"wrote alignment trace {args.trace}")
    return 0


def _cmd_eval(args) -> int:
    cfg = _apply_sets(_load_config(args.config), args.set)
    _check_keys(cfg, {"stft", "css"}, "eval")
    stft_cfg = _build(StftConfig, cfg.get("stft", {}), "stft.")
    css_cfg = _build(css_mod.CssConfig, cfg.get("css", {}), "css.")
    model = train_mod.load_model(args.checkpoint)
    corpus = mixer.read_corpus(args.corpus)
    report = metrics.evaluate(
        model, corpus, css_cfg, stft_cfg, run_id=str(args.checkpoint)
    )
    print(report.format())
    if args.out_csv:
        report.write_csv(args.out_csv)
        print(f"wrote {args.out_csv}")
    if args.out_json:
        report.write_json(args.out_json)
        print(f"wrote {args.out_json}")
    return 0


def _cmd_schedules(args) -> int:
    sched = ShiftSchedule(k=args.k, t0=args.t0)
    warmup = args.warmup if args.warmup is not None else train_mod.scaled_warmup(args.total)
    optim = train_mod.OptimConfig(
        peak_lr=args.peak_lr, warmup_steps=warmup, total_steps=args.total
    )
    with open(args.out, "w") as fh:
        fh.write("t,lambda,lr\n")
        for t in range(0, args.total + 1, args.stride):
            fh.write(f"{t},{lambda_weight(t, sched)!r},{train_mod.lr_at(t, optim)!r}\n")
    print(f"wrote {args.out}")
    return 0


class _UsageExit(SystemExit):
    def __init__(self, code, message=None):
        super().__init__(code)
        self.message = message


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        raise _UsageExit(1, f"{self.prog}: error: {message}")


def _add_common(p, config=True):
    if config:
        p.add_argument("--config", help="JSON config file")
        p.add_argument(
            "--set",
            action="append",
            metavar="KEY=VALUE",
            help="override a config key (dotted paths, JSON values)",
        )
    p.add_argument("--seed", type=int, default=0, help="master random seed")
    p.add_argument("--workers", type=int, default=1, help="parallelism bound")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="tinysep",
        description="Small fast speech separation models via teacher-student distillation",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.RawDescriptionHelpFormatter

    p = sub.add_parser(
        "synth",
        help="synthesize a mixture corpus",
        epilog=_config_epilog(_SYNTH_KEYS),
        formatter_class=fmt,
    )
    _add_common(p)
    p.add_argument("--n", type=int, required=True, help="number of samples")
    p.add_argument("--out", required=True, help="output corpus directory")
    p.add_argument(
        "--unlabeled", action="store_true", help="drop reference signals"
    )
    p.set_defaults(func=_cmd_synth)

    for mode, help_text in (
        ("train-teacher", "train the large teacher with the reference loss"),
        ("train-baseline", "train a student from scratch"),
    ):
        p = sub.add_parser(
            mode,
            help=help_text,
            epilog=_config_epilog(_TRAIN_KEYS),
            formatter_class=fmt,
        )
        _add_common(p)
        p.add_argument("--corpus", required=True, help="labeled corpus manifest")
        p.add_argument("--out", help=f"checkpoint dir (default ${CHECKPOINT_DIR_ENV})")
        p.set_defaults(func=lambda a, m=mode.split("-")[1]: _cmd_train(a, m))

    p = sub.add_parser(
        "distill",
        help="teacher-student training in one of the ablation modes",
        epilog=_config_epilog(_TRAIN_KEYS),
        formatter_class=fmt,
    )
    _add_common(p)
    p.add_argument(
        "--mode",
        choices=["vanilla_ts", "lts", "os", "lts_os", "unlabeled_lts_os"],
        default="lts_os",
    )
    p.add_argument("--teacher-checkpoint", required=True, help="frozen teacher")
    p.add_argument("--corpus", help="labeled corpus manifest")
    p.add_argument("--unlabeled-corpus", help="unlabeled corpus manifest")
    p.add_argument("--student-init", help="checkpoint to start the student from")
    p.add_argument(
        "--k",
        type=float,
        default=1e-4,
        help="annealing rate on the reference 260k-step scale; rescaled "
        "by (260000 / optim.total_steps)",
    )
    p.add_argument(
        "--t0", type=int, default=None, help="annealing midpoint step (absolute)"
    )
    p.add_argument("--stage1-steps", type=int, help="unlabeled pretraining steps")
    p.add_argument("--out", help=f"checkpoint dir (default ${CHECKPOINT_DIR_ENV})")
    p.set_defaults(func=_cmd_distill)

    p = sub.add_parser(
        "separate",
        help="separate a WAV into per-source WAVs",
        epilog=_config_epilog(_SEPARATE_KEYS),
        formatter_class=fmt,
    )
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="input WAV")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--trace", help="write per-window alignment trace (JSONL)")
    p.set_defaults(func=_cmd_separate)

    p = sub.add_parser(
        "eval",
        help="report best-permutation SI-SNR over a labeled corpus",
        epilog=_config_epilog(_SEPARATE_KEYS),
        formatter_class=fmt,
    )
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True, help="labeled corpus manifest")
    p.add_argument("--out-csv", help="per-sample CSV path")
    p.add_argument("--out-json", help="report JSON path")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser(
        "schedules",
        help="dump (t, lambda, lr) rows to CSV",
        epilog="config keys (flags only):\n  k\n  t0\n  total\n  peak-lr\n  warmup\n  stride",
        formatter_class=fmt,
    )
    p.add_argument("--k", type=float, required=True, help="annealing rate (absolute)")
    p.add_argument("--t0", type=int, required=True, help="annealing midpoint")
    p.add_argument("--total", type=int, required=True, help="last step to dump")
    p.add_argument("--peak-lr", type=float, default=1e-4)
    p.add_argument("--warmup", type=int, default=None)
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--out", required=True, help="CSV path")
    p.set_defaults(func=_cmd_schedules)
    return parser


def run(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageExit as e:
        if e.message:
            print(e.message, file=sys.stderr)
        return e.code
    except SystemExit as e:  # --help
        return 0 if (e.code or 0) == 0 else 1
    try:
        return args.func(args) or 0
    except UsageError as e:
        print(f"tinysep: error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"tinysep: runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
