"""Command line entry point: ``seqcount <subcommand>``.

Exit codes: 0 success, 1 verification failure, 2 usage or input error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from .autodiff import ShapeError
from .config import ConfigError, load_run_config, task_config
from .episodes import (META_TEST, META_TRAIN, NUM_CLASSES, EpisodeFormatError, EpisodeTask, GlyphClass,
                       ScenePointLabel, generate_tasks, read_episodes, sort_labels, split_classes,
                       write_episodes)
from .evaluate import evaluate, plot_report
from .model import MICRO
from .trainer import (CheckpointError, Dataset, EpisodePool, TaskStream, load_checkpoint,
                      model_config_of, restore, train)
from .verify import gradcheck_line, micro_gradcheck, worst_params

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

SPLIT_FILES = {META_TRAIN: "meta-train.sqep", "validation": "validation.sqep", META_TEST: "meta-test.sqep"}

log = logging.getLogger("seqcount")


class InputError(Exception):
    """Bad user input; reported on stderr with exit code 2."""


# ------------------------------------------------------------------- helpers

def _class_list(text):
    if text is None:
        return None
    try:
        ids = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise InputError(f"class list must be comma-separated integers, got {text!r}") from None
    bad = [c for c in ids if not 0 <= c < NUM_CLASSES]
    if bad:
        raise InputError(f"class id {bad[0]} outside 0..{NUM_CLASSES - 1}")
    if len(set(ids)) != len(ids):
        raise InputError("class list repeats an id")
    return ids


def _split_file(data, split):
    """``data`` is a directory of split files or a single episode file."""
    if os.path.isdir(data):
        path = os.path.join(data, SPLIT_FILES[split])
    else:
        path = data
    if not os.path.exists(path):
        raise InputError(f"episode file not found: {path}")
    return path


def _load_model(path):
    ckpt = load_checkpoint(path)
    cfg = model_config_of(ckpt)
    params, _ = restore(ckpt, cfg)
    return params, cfg


# ------------------------------------------------------------------ commands

def cmd_gen_data(args) -> int:
    cfg = task_config(args.ways, args.shots)
    train_cls = _class_list(args.train_classes)
    test_cls = _class_list(args.test_classes)
    if test_cls is None:
        test_cls = split_classes(META_TEST) if train_cls is None else \
            [c for c in range(NUM_CLASSES) if c not in train_cls]
    if train_cls is None:
        train_cls = [c for c in range(NUM_CLASSES) if c not in test_cls]
    overlap = sorted(set(train_cls) & set(test_cls))
    if overlap:
        raise InputError(f"meta-train and meta-test classes overlap: {overlap}")
    os.makedirs(args.out, exist_ok=True)
    plan = [(META_TRAIN, args.train_tasks, train_cls), ("validation", args.val_tasks, train_cls),
            (META_TEST, args.test_tasks, test_cls)]
    for split, n, classes in plan:
        path = os.path.join(args.out, SPLIT_FILES[split])
        if n == 0:
            print(f"warning: no {split} tasks requested, {path} not written", file=sys.stderr)
            continue
        write_episodes(path, generate_tasks(args.seed, split, n, cfg, classes))
        print(f"wrote {n} {split} tasks to {path}")
    for name, classes in (("meta-train", train_cls), ("meta-test", test_cls)):
        print(f"{name} classes ({len(classes)}): " +
              " ".join(f"{c}:{GlyphClass.from_id(c).name}" for c in classes))
    return EXIT_OK


def cmd_train(args) -> int:
    overrides = {}
    if args.no_coords:
        overrides["use_coords"] = "false"
    if args.no_guide:
        overrides["guide"] = "false"
    if args.sigma is not None:
        overrides["sigma"] = args.sigma
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if args.lr is not None:
        overrides["lr0"] = args.lr
    run = load_run_config(args.config, overrides)
    if args.data is not None:
        pool = read_episodes(_split_file(args.data, META_TRAIN))
        if not pool:
            raise InputError("meta-train episode file holds no tasks")
        val_path = os.path.join(args.data, SPLIT_FILES["validation"]) if os.path.isdir(args.data) else None
        validation = read_episodes(val_path) if val_path and os.path.exists(val_path) else []
        dataset = Dataset(EpisodePool(pool), validation[:run.train.validation_tasks])
    else:
        validation = generate_tasks(run.train.seed, "validation", run.train.validation_tasks, run.task)
        dataset = Dataset(TaskStream(run.task), validation)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "config.txt"), "w") as fh:
        fh.write(run.to_text())
    result = train(run.train, run.model, dataset, out_dir=args.out, resume=args.resume)
    last = result.log[-1] if result.log else {}
    print(json.dumps({"epochs": len(result.history), "final": last}))
    return EXIT_OK


def cmd_eval(args) -> int:
    params, cfg = _load_model(args.checkpoint)
    tasks = read_episodes(_split_file(args.data, META_TEST))
    if args.shots is not None:
        tasks = [t.with_shots(args.shots) for t in tasks]
    report = evaluate(params, cfg, tasks, radius=args.radius, t_max=args.tmax, workers=args.workers)
    print(report.to_text(), end="")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(report.as_dict(), fh, indent=2)
    if args.plot:
        plot_report(report, args.plot)
    return EXIT_OK


def _read_image(path, size):
    from PIL import Image

    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise InputError(f"cannot read image {path}: {exc}") from None
    if arr.shape[:2] != (size, size):
        raise InputError(f"{path}: image is {arr.shape[1]}x{arr.shape[0]}, model expects {size}x{size}")
    return arr


def _read_points(path, names, shape):
    labels = []
    try:
        lines = open(path).read().splitlines()
    except OSError as exc:
        raise InputError(f"cannot read points file {path}: {exc}") from None
    for lineno, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise InputError(f"{path}:{lineno}: expected 'y x class_name'")
        try:
            y, x = int(parts[0]), int(parts[1])
        except ValueError:
            raise InputError(f"{path}:{lineno}: coordinates must be integers") from None
        if not (0 <= y < shape[0] and 0 <= x < shape[1]):
            raise InputError(f"{path}:{lineno}: point ({y}, {x}) lies outside the image")
        if parts[2] not in names:
            raise InputError(f"{path}:{lineno}: class {parts[2]!r} is not among --classes")
        labels.append(ScenePointLabel(y, x, names.index(parts[2])))
    return sort_labels(labels)


def cmd_count(args) -> int:
    params, cfg = _load_model(args.checkpoint)
    names = [n.strip() for n in args.classes.split(",") if n.strip()]
    if not names or len(set(names)) != len(names):
        raise InputError("--classes must list distinct class names")
    images, labels = [], []
    for spec in args.support:
        img_path, sep, pts_path = spec.partition(":")
        if not sep:
            raise InputError(f"support entry {spec!r} must be IMAGE:POINTS")
        img = _read_image(img_path, cfg.image_size)
        images.append(img)
        labels.append(_read_points(pts_path, names, img.shape))
    present = {lab.class_id for labs in labels for lab in labs}
    for i, name in enumerate(names):
        if i not in present:
            raise InputError(f"class {name!r} has no annotated instance in the support images")
    query = _read_image(args.query, cfg.image_size)
    task = EpisodeTask(tuple(range(len(names))), tuple(range(len(names))), images, labels, query, [])
    from .model import predict

    preds = predict(params, cfg, task, args.tmax)
    for i, name in enumerate(names):
        pts = [p for p, c in preds if c == i]
        print(f"{name}: {len(pts)} " + " ".join(f"({y},{x})" for y, x in pts))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if not args.micro:
        raise InputError("only the --micro sweep is available")
    report = micro_gradcheck(MICRO, seed=args.seed, tol=args.tol)
    print(gradcheck_line(report))
    if not report.passed:
        for name, err in worst_params(report):
            print(f"  {name}: {err:.3e}")
        return EXIT_FAIL
    return EXIT_OK


# -------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="seqcount", description="Few-shot sequential object counting.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write meta-train, validation and meta-test episode files")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--train-tasks", type=int, default=1000)
    g.add_argument("--val-tasks", type=int, default=50)
    g.add_argument("--test-tasks", type=int, default=200)
    g.add_argument("--ways", default="2..5", help="range A..B")
    g.add_argument("--shots", default="3..5", help="range A..B")
    g.add_argument("--train-classes", help="comma-separated global class ids")
    g.add_argument("--test-classes", help="comma-separated global class ids")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="episodic training")
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--data", help="directory from gen-data; omit to sample tasks on the fly")
    t.add_argument("--config", help="key = value file")
    t.add_argument("--no-coords", action="store_true", help="drop the coordinate channels")
    t.add_argument("--no-guide", action="store_true", help="pool support prototypes by attention")
    t.add_argument("--sigma", type=float, help="label Gaussian std in pixels (default 8)")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float, help="initial learning rate")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on meta-test episodes")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True, help="episode file or gen-data directory")
    e.add_argument("--radius", type=float, default=16.0)
    e.add_argument("--tmax", type=int, default=32)
    e.add_argument("--shots", type=int, help="use only the first N support images")
    e.add_argument("--workers", type=int, default=1)
    e.add_argument("--json", help="also write the report as JSON")
    e.add_argument("--plot", help="write metric-vs-shots curves to this image")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("count", help="count objects in one query image")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--classes", required=True, help="comma-separated class names")
    c.add_argument("--support", nargs="+", required=True, metavar="IMAGE:POINTS",
                   help="support image and its 'y x class_name' points file")
    c.add_argument("--query", required=True)
    c.add_argument("--tmax", type=int, default=32)
    c.set_defaults(func=cmd_count)

    v = sub.add_parser("gradcheck", help="finite-difference check of the whole pipeline")
    v.add_argument("--micro", action="store_true", help="32x32 two-way one-shot episode")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--tol", type=float, default=1e-3)
    v.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(message)s")
    try:
        return args.func(args)
    except (InputError, ConfigError, CheckpointError, EpisodeFormatError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
