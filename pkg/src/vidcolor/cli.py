"""``vidcolor`` command line: gen-data, train, colorize, evaluate.

Exit codes: 0 success, 1 runtime failure, 2 usage error. Settings resolve as
flags, then the ``--config`` JSON file, then defaults. ``LC4_DATA_DIR`` is the
default data root wherever a dataset directory or manifest is expected.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig
from .errors import ValidationError
from .synthvid import DatasetConfig, DatasetManifest, read_png, to_luminance, write_clip_frames

log = logging.getLogger("vidcolor")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    """Bad invocation detected after argument parsing."""


def _data_default() -> str | None:
    return os.environ.get("LC4_DATA_DIR")


def _manifest_path(value: str | None) -> Path:
    value = value or _data_default()
    if not value:
        raise UsageError("--data is required (or set LC4_DATA_DIR)")
    path = Path(value)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.exists():
        raise UsageError(f"manifest not found: {path}")
    return path


def _run_config(args) -> RunConfig:
    config = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = {
        "lr": getattr(args, "lr", None),
        "batch_size": getattr(args, "batch_size", None),
        "seed": getattr(args, "seed", None),
        "lexicon": getattr(args, "lexicon", None),
    }
    steps = getattr(args, "steps", None)
    if steps is not None:
        overrides["stage1_steps" if args.stage == 1 else "stage2_steps"] = steps
    return config.updated(**overrides).validate()


def _parse_pair(text: str) -> tuple[str, str]:
    parts = text.split(":")
    if len(parts) != 2 or not all(parts):
        raise argparse.ArgumentTypeError(f"expected color:kind, got {text!r}")
    return parts[0].lower(), parts[1].lower()


def cmd_gen_data(args) -> int:
    out = args.out or _data_default()
    if not out:
        raise UsageError("--out is required (or set LC4_DATA_DIR)")
    base = json.loads(Path(args.config).read_text()) if args.config else {}
    flags = {
        "frame_size": args.frame_size,
        "clip_length": args.clip_length,
        "shape_count": args.shape_count,
        "exclude_pairs": args.exclude,
        "seed": args.seed,
        "creative_test_clips": args.creative_test,
    }
    base.update({k: v for k, v in flags.items() if v is not None})
    try:
        config = DatasetConfig.from_json(base)
    except (TypeError, ValidationError) as exc:
        raise UsageError(str(exc)) from exc
    from .synthvid import generate_dataset

    manifest = generate_dataset(args.train, args.val, args.test, config, out)
    print(Path(manifest.root) / "manifest.json")
    return EXIT_OK


def cmd_train(args) -> int:
    from .diffusion import train_stage1, train_stage2

    manifest = _manifest_path(args.data)
    if args.stage == 2 and not args.stage1_ckpt:
        raise UsageError("stage 2 needs --stage1-ckpt")
    if args.stage == 2 and not Path(args.stage1_ckpt).exists():
        raise UsageError(f"stage-1 checkpoint not found: {args.stage1_ckpt}")
    if args.resume and not Path(args.resume).exists():
        raise UsageError(f"checkpoint to resume not found: {args.resume}")
    config = _run_config(args)
    log_path = args.log or str(Path(args.ckpt_out).with_suffix(".jsonl"))
    kwargs = dict(resume=args.resume, log_path=log_path, checkpoint_every=args.checkpoint_every)
    if args.stage == 1:
        trainer = train_stage1(manifest, config, args.ckpt_out, **kwargs)
    else:
        trainer = train_stage2(manifest, args.stage1_ckpt, config, args.ckpt_out, **kwargs)
    print(json.dumps({"checkpoint": args.ckpt_out, "stage": args.stage, "step": trainer.step, "log": log_path}))
    return EXIT_OK


def _read_mono_dir(path: Path) -> np.ndarray:
    files = sorted(p for p in path.iterdir() if p.suffix.lower() == ".png")
    if not files:
        raise UsageError(f"no PNG frames in {path}")
    return to_luminance(np.stack([read_png(p) for p in files]))


def cmd_colorize(args) -> int:
    from .diffusion import colorize, load_checkpoint

    if not Path(args.ckpt).exists():
        raise UsageError(f"checkpoint not found: {args.ckpt}")
    jobs = []
    if args.input:
        if args.caption is None or not args.caption.strip():
            raise UsageError("--caption must be non-empty")
        if not Path(args.input).is_dir():
            raise UsageError(f"input directory not found: {args.input}")
        jobs.append((Path(args.out), _read_mono_dir(Path(args.input)), args.caption, args.seed))
    else:
        manifest = DatasetManifest.load(_manifest_path(args.data))
        for k, entry in enumerate(manifest.split(args.split)):
            clip = manifest.load_clip(entry)
            jobs.append((Path(args.out) / entry.id, clip.luminance, args.caption or entry.caption, args.seed + k))
    ckpt = load_checkpoint(args.ckpt)
    model = ckpt.build_model()
    for out_dir, mono, caption, seed in jobs:
        plan_path = args.dump_plan if len(jobs) == 1 else None
        intervals = [1] if args.no_ccf else None
        frames = colorize(model, mono, caption, seed=seed, steps=args.steps, intervals=intervals, plan_path=plan_path)
        write_clip_frames(frames, out_dir)
        print(out_dir)
    echo = {"args": {k: v for k, v in vars(args).items() if k != "func"}, "config": ckpt.header["config"],
            "checkpoint_step": ckpt.step, "checkpoint_stage": ckpt.stage}
    Path(args.out).mkdir(parents=True, exist_ok=True)
    (Path(args.out) / "run.json").write_text(json.dumps(echo, indent=1))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .metrics import evaluate_dataset

    manifest = _manifest_path(args.data)
    if not Path(args.pred).is_dir():
        raise UsageError(f"prediction directory not found: {args.pred}")
    report = evaluate_dataset(args.pred, manifest, args.split)
    report.save(args.out)
    print(json.dumps(report.mean))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vidcolor", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render a synthetic moving-shapes dataset")
    g.add_argument("--train", type=int, default=200, help="number of training clips")
    g.add_argument("--val", type=int, default=20, help="number of validation clips")
    g.add_argument("--test", type=int, default=20, help="number of test clips")
    g.add_argument("--out", help="output directory (default: $LC4_DATA_DIR)")
    g.add_argument("--seed", type=int, help="dataset seed")
    g.add_argument("--frame-size", type=int, nargs=2, metavar=("H", "W"), help="frame height and width")
    g.add_argument("--clip-length", type=int, help="frames per clip")
    g.add_argument("--shape-count", type=int, help="shapes per clip (default: 1..3 at random)")
    g.add_argument("--exclude", type=_parse_pair, action="append", metavar="COLOR:KIND",
                   help="keep this pairing out of train/val (repeatable)")
    g.add_argument("--creative-test", type=int, metavar="N", help="force excluded pairs into the first N test clips")
    g.add_argument("--config", help="dataset config JSON")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run training stage 1 or 2")
    t.add_argument("--stage", type=int, choices=(1, 2), required=True, help="1: denoiser, 2: pre-fusion")
    t.add_argument("--data", help="manifest or dataset directory (default: $LC4_DATA_DIR)")
    t.add_argument("--ckpt-out", required=True, help="checkpoint to write")
    t.add_argument("--stage1-ckpt", help="stage-1 checkpoint (stage 2 only)")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--config", help="run config JSON")
    t.add_argument("--steps", type=int, help="total steps for this stage")
    t.add_argument("--lr", type=float, help="learning rate")
    t.add_argument("--batch-size", type=int, help="clips per step")
    t.add_argument("--seed", type=int, help="training seed")
    t.add_argument("--lexicon", help="color lexicon file, one word per line")
    t.add_argument("--log", help="JSON-lines training log (default: next to the checkpoint)")
    t.add_argument("--checkpoint-every", type=int, default=500, help="save every N steps (0: only at the end)")
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("colorize", help="colorize a monochrome frame directory or a dataset split")
    c.add_argument("--ckpt", required=True, help="trained checkpoint")
    c.add_argument("--input", help="directory of monochrome PNG frames")
    c.add_argument("--caption", help="color description (required with --input)")
    c.add_argument("--data", help="manifest to colorize instead of --input (default: $LC4_DATA_DIR)")
    c.add_argument("--split", default="test", help="split used with --data")
    c.add_argument("--out", required=True, help="output directory for PNG frames")
    c.add_argument("--seed", type=int, default=0, help="sampling seed")
    c.add_argument("--steps", type=int, help="DDIM steps (default: from the checkpoint config)")
    c.add_argument("--dump-plan", help="write the cross-clip fusion plan JSON here")
    c.add_argument("--no-ccf", action="store_true", help="colorize long videos as independent clips")
    c.set_defaults(func=cmd_colorize)

    e = sub.add_parser("evaluate", help="score predictions against a dataset split")
    e.add_argument("--pred", required=True, help="directory holding <clip_id>/frame_<k>.png")
    e.add_argument("--data", help="manifest or dataset directory (default: $LC4_DATA_DIR)")
    e.add_argument("--split", default="test", help="split to score")
    e.add_argument("--out", required=True, help="report JSON path")
    e.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"vidcolor {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValidationError as exc:
        print(f"vidcolor {args.command}: invalid input: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - report and map to the failure exit code
        print(f"vidcolor {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    raise SystemExit(main())
