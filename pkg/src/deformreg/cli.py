"""Command-line entry points.

Subcommands: ``phantom`` (generate a synthetic dataset), ``train`` (run the
staged training loop), ``register`` (one pair -> field file + warped volume),
``evaluate`` (metrics report JSON), ``ablate`` (loss/augmentation grid), and
``overlay`` (label-overlay PNG panels).

Exit codes: 0 ok, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .data import (
    ManifestError,
    PhantomSpec,
    VolumeIOError,
    build_dataset,
    make_phantom_dataset,
    read_field,
    read_labels,
    read_volume,
    save_phantom_dataset,
    write_field,
    write_volume,
)
from .evaluation import ablation_run, ablation_to_markdown, evaluate, overlay_panels
from .grid import warp
from .nets import load_checkpoint
from .selftrain import NumericalError, TrainConfig, TrainState, desk_scale_config, register, run_training

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # map argparse's exit(2) onto exit code 1
        raise UsageError(message)


def _load_train_config(path, seed) -> TrainConfig:
    if path is None:
        config = desk_scale_config()
    else:
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ManifestError(f"cannot read config {path}: {exc}") from exc
        config = TrainConfig.from_dict(raw)
    if seed is not None:
        from dataclasses import replace

        config = replace(config, seed=seed)
    return config


def _state_from_checkpoint(path, config: TrainConfig | None = None) -> TrainState:
    extractor, projector, manifest = load_checkpoint(path)
    config = config or desk_scale_config()
    from dataclasses import replace

    config = replace(config, net=extractor.config)
    state = TrainState(config=config, extractor=extractor, projector=projector)
    state.stage = manifest.get("extra", {}).get("stage", 0)
    return state


# ---------------------------------------------------------------------------
# subcommand implementations
# ---------------------------------------------------------------------------

def _cmd_phantom(args) -> int:
    spec_kwargs = {}
    if args.config:
        spec_kwargs = json.loads(Path(args.config).read_text())
    if "shape" in spec_kwargs:
        spec_kwargs["shape"] = tuple(spec_kwargs["shape"])
    if "radius_range" in spec_kwargs:
        spec_kwargs["radius_range"] = tuple(spec_kwargs["radius_range"])
    spec = PhantomSpec(**spec_kwargs)
    out = Path(args.out)
    for split, count in (("train", args.train_pairs), ("test", args.test_pairs)):
        if count <= 0:
            continue
        seed = args.seed if split == "train" else args.seed + 7919
        dataset = make_phantom_dataset(count, spec, seed=seed, split=split)
        manifest = save_phantom_dataset(dataset, out / split, fmt=args.format)
        print(f"wrote {count} {split} pairs -> {manifest}")
    return EXIT_OK


def _cmd_train(args) -> int:
    config = _load_train_config(args.config, args.seed)
    dataset = build_dataset(args.manifest, split=args.split)
    out = Path(args.out)
    state = run_training(dataset, config, out_dir=out)
    (out / "train_config.json").write_text(json.dumps(config.to_dict(), indent=2, default=str))
    print(f"trained {config.stages} stages; checkpoints in {out}")
    return EXIT_OK


def _cmd_register(args) -> int:
    config = _load_train_config(args.config, args.seed)
    state = _state_from_checkpoint(args.checkpoint, config)
    fixed = read_volume(args.fixed)
    moving = read_volume(args.moving)
    field = register(state, fixed, moving)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_field(field, out / "displacement.raw")
    warped = warp(moving, field)
    ext = ".nii.gz" if args.format == "nifti" else ".raw"
    write_volume(warped, out / f"warped{ext}")
    print(
        f"registered in {state.last_inference_seconds:.2f}s; "
        f"field -> {out / 'displacement.raw'}"
    )
    return EXIT_OK


def _cmd_evaluate(args) -> int:
    dataset = build_dataset(args.manifest, split=args.split)
    if args.checkpoint:
        config = _load_train_config(args.config, args.seed)
        state = _state_from_checkpoint(args.checkpoint, config)
    else:
        state = None  # zero-field "initial" row
    report = evaluate(state, dataset, timing_repeats=args.timing_repeats, seed=args.seed or 0)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "report.json"
    report.to_json(path)
    agg = report.aggregate
    dice_txt = f"{agg.get('dice_mean'):.3f}" if agg.get("dice_mean") is not None else "n/a"
    print(f"evaluated {len(report.per_pair)} pairs: dice {dice_txt}, report -> {path}")
    return EXIT_OK


def _cmd_ablate(args) -> int:
    config = _load_train_config(args.config, args.seed)
    train = build_dataset(args.manifest, split="train")
    test = build_dataset(args.manifest, split=args.test_split)
    seeds = [int(s) for s in args.seeds.split(",")]
    result = ablation_run(
        train,
        test,
        config,
        seeds=seeds,
        loss_modes=tuple(args.loss_modes.split(",")),
        aug_modes=tuple(args.aug_modes.split(",")),
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.json").write_text(json.dumps(result, indent=2))
    markdown = ablation_to_markdown(result)
    (out / "ablation.md").write_text(markdown + "\n")
    print(markdown)
    return EXIT_OK


def _cmd_overlay(args) -> int:
    fixed = read_volume(args.fixed)
    labels_fixed = read_labels(args.fixed_labels)
    labels_moving = read_labels(args.moving_labels)
    if args.field:
        field = read_field(args.field)
        labels_warped = warp(labels_moving, field)
    else:
        labels_warped = labels_moving
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = overlay_panels(
        fixed, labels_fixed, labels_moving, labels_warped, out / "overlay"
    )
    for path in written:
        print(f"wrote {path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _build_parser() -> _Parser:
    parser = _Parser(prog="deformreg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic labeled dataset")
    p.add_argument("--config", help="PhantomSpec overrides as JSON")
    p.add_argument("--train-pairs", type=int, default=12)
    p.add_argument("--test-pairs", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=("nifti", "raw"), default="raw")
    p.set_defaults(func=_cmd_phantom)

    p = sub.add_parser("train", help="run staged self-training on a dataset")
    p.add_argument("manifest", help="dataset manifest JSON")
    p.add_argument("--config", help="TrainConfig JSON (default: desk-scale preset)")
    p.add_argument("--split", default="train")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("register", help="register one pair with a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("fixed")
    p.add_argument("moving")
    p.add_argument("--config", help="TrainConfig JSON for solver settings")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=("nifti", "raw"), default="raw")
    p.set_defaults(func=_cmd_register)

    p = sub.add_parser("evaluate", help="metrics report over a dataset split")
    p.add_argument("manifest")
    p.add_argument("--checkpoint", help="omit to score the zero-field baseline")
    p.add_argument("--config", help="TrainConfig JSON for solver settings")
    p.add_argument("--split", default="test")
    p.add_argument("--seed", type=int)
    p.add_argument("--timing-repeats", type=int, default=3)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("ablate", help="loss-mode / augmentation ablation grid")
    p.add_argument("manifest")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--seeds", default="0", help="comma-separated training seeds")
    p.add_argument("--loss-modes", default="reg_only,contrastive_frozen,joint")
    p.add_argument("--aug-modes", default="geometric")
    p.add_argument("--test-split", default="test")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("overlay", help="four-panel label overlay PNGs")
    p.add_argument("--fixed", required=True)
    p.add_argument("--fixed-labels", required=True)
    p.add_argument("--moving-labels", required=True)
    p.add_argument("--field", help="displacement field to warp moving labels")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_overlay)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (VolumeIOError, ManifestError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
