"""``mvc3d`` command-line entry point.

Exit codes: 0 success, 1 internal failure, 2 usage or validation error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .dataset import Entry, Manifest, ManifestError, load_manifest, synth_generate
from .model import CheckpointError
from .render import Camera, OffParseError, PhongMaterial, check_rig, load_off, normalize_mesh, render_ring
from .runs import RunConfig, ViewCountMismatch, load_run_checkpoint, run_eval, run_train, train_and_test
from .views import View, ViewSet

log = logging.getLogger("mvc3d")

USAGE_ERRORS = (ValueError, FileNotFoundError, ManifestError, OffParseError, CheckpointError, KeyError)


class CommandError(Exception):
    """Validation failure that should exit with status 2."""


def _ints(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


# flag dest -> dotted RunConfig key
TRAIN_FLAGS = {
    "views": "model.n_views",
    "interval": "data.interval",
    "start": "data.start",
    "schedule": "model.viewpoint_schedule",
    "pattern": "model.conv_pattern",
    "channels": "model.channels",
    "fc_dims": "model.fc_dims",
    "image_size": "model.image_size",
    "dropout": "model.dropout_rate",
    "init_std": "model.init_std",
    "lr": "train.initial_lr",
    "lr_decay_every": "train.lr_decay_every",
    "lam": "train.lam",
    "batch_size": "train.batch_size",
    "epochs": "train.max_epochs",
    "early_stop_threshold": "train.early_stop_threshold",
    "oversample": "train.oversample_target",
    "random_start": "train.random_start",
    "data": "data.path",
    "out": "out",
}


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file of dotted keys; flags override it")
    p.add_argument("--data", help="corpus directory or manifest.json")
    p.add_argument("--out", help="output directory")
    p.add_argument("--views", type=int, help="number of views N")
    p.add_argument("--interval", type=float, help="degrees between selected views")
    p.add_argument("--start", type=int, help="ring index of the first view")
    p.add_argument("--schedule", help="fixed-1|fixed-3|fixed-5|fixed-7|increasing|decreasing or 8 comma-separated extents")
    p.add_argument("--pattern", choices=("joint3d", "independent2d"))
    p.add_argument("--channels", type=_ints, help="8 conv widths")
    p.add_argument("--fc-dims", type=_ints, help="Fc1,Fc2 widths")
    p.add_argument("--image-size", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--init-std", type=float)
    p.add_argument("--lr", type=float, help="initial learning rate")
    p.add_argument("--lr-decay-every", type=int)
    p.add_argument("--lam", type=float, help="L2 weight-decay strength")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--epochs", type=int, help="maximum epochs")
    p.add_argument("--early-stop-threshold", type=float)
    p.add_argument("--oversample", type=int, help="oversample every class to this many instances")
    p.add_argument("--random-start", action="store_true", default=None, help="random arc start per sample and epoch")
    p.add_argument("--seed", type=int)


def _run_config(args) -> RunConfig:
    overrides = {key: getattr(args, dest, None) for dest, key in TRAIN_FLAGS.items()}
    sched = overrides.get("model.viewpoint_schedule")
    if sched and "," in sched:
        overrides["model.viewpoint_schedule"] = _ints(sched)
    if args.seed is not None:
        overrides["model.seed"] = overrides["train.seed"] = args.seed
    return RunConfig.resolve(args.config, overrides)


def cmd_render(args) -> int:
    check_rig(args.views, args.theta_step)
    if args.mesh:
        paths = [Path(args.mesh)]
    else:
        root = Path(args.mesh_dir)
        if not root.is_dir():
            raise FileNotFoundError(f"mesh directory not found: {root}")
        paths = sorted(root.rglob("*.off"))
        if not paths:
            raise FileNotFoundError(f"no .off files under {root}")
    for p in paths:
        if not p.is_file():
            raise FileNotFoundError(f"mesh file not found: {p}")
    out = Path(args.out)
    entries, classes = [], set()
    cam = Camera(distance=args.distance)
    for p in paths:
        category = args.category or (p.parent.name if args.mesh_dir else "unknown")
        oid = p.stem
        mesh = normalize_mesh(load_off(p))
        vs = render_ring(
            mesh, args.views, args.theta_step, args.phi, PhongMaterial(), out / category / args.split / oid,
            args.size, oid, category, cam,
        )
        rel = [View(v.azimuth, v.elevation, Path(v.path).relative_to(out).as_posix()) for v in vs.views]
        entries.append(Entry(args.split, ViewSet(oid, category, rel, "rendered")))
        classes.add(category)
    Manifest(out.name or "rendered", sorted(classes), entries, out).write(out / "manifest.json")
    print(f"rendered {len(entries)} object(s) x {args.views} views into {out}")
    return 0


def cmd_synth(args) -> int:
    m = synth_generate(args.out, args.classes, args.instances, args.seed, args.size)
    print(f"wrote {len(m.entries)} objects ({m.split_sizes()}) to {args.out}")
    return 0


def cmd_train(args) -> int:
    rc = _run_config(args)
    if rc["out"] is None:
        raise CommandError("--out is required")
    result = run_train(rc)
    summary = {
        "epochs": len(result.log),
        "final_val_loss": result.final_val_loss,
        "val_accuracy": result.metrics.accuracy,
        "checkpoint_sha256": result.checkpoint_checksum,
    }
    print(json.dumps(summary, indent=2))
    return 0


def cmd_eval(args) -> int:
    model, extra = load_run_checkpoint(args.checkpoint)
    data = Path(args.data)
    manifest = load_manifest(data / "manifest.json" if data.is_dir() else data)
    classes = extra.get("classes")
    if classes is not None and list(classes) != list(manifest.classes):
        raise CommandError(f"checkpoint classes {classes} differ from corpus classes {manifest.classes}")
    interval = args.interval if args.interval is not None else extra.get("interval", 10.0)
    start = args.start if args.start is not None else extra.get("start", 0)
    metrics = run_eval(
        model, manifest, args.split, interval, start, extra.get("elevation"), args.retrieval, n_views=args.views
    )
    text = metrics.to_json()
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval_metrics.json").write_text(text)
    print(text, end="")
    print(metrics.per_class_table())
    return 0


SWEEP_COLUMNS = ("n_views", "interval", "mean_acc", "std_acc", "runs")


def cmd_sweep_views(args) -> int:
    base = _run_config(args)
    if base["out"] is None:
        raise CommandError("--out is required")
    out = Path(base["out"])
    manifest = load_manifest(Path(base["data.path"]) / "manifest.json" if Path(base["data.path"]).is_dir() else base["data.path"])
    seed0 = int(base["train.seed"])
    rows = []
    for n in args.views_list:
        accs = []
        for r in range(args.repeats):
            rc = RunConfig(dict(base.values))
            rc.update({"model.n_views": n, "model.seed": seed0 + r, "train.seed": seed0 + r, "out": str(out / f"N{n}_r{r}")})
            _, metrics = train_and_test(rc, manifest)
            accs.append(metrics.accuracy)
            log.info("N=%d repeat %d test accuracy %.4f", n, r, metrics.accuracy)
        rows.append((n, base["data.interval"], float(np.mean(accs)), float(np.std(accs)), len(accs)))
    out.mkdir(parents=True, exist_ok=True)
    base.write(out / "run_config.json")
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_COLUMNS)
        for n, interval, mean, std, runs in rows:
            w.writerow([n, f"{interval:g}", f"{mean:.6f}", f"{std:.6f}", runs])
    print((out / "sweep.csv").read_text(), end="")
    return 0


def cmd_verify(args) -> int:
    from .verify import run_checks

    results = run_checks()
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mvc3d", description="Multi-view 3D CNN toolkit")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("render", help="render OFF meshes over the view ring")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--mesh", help="one OFF file")
    src.add_argument("--mesh-dir", help="directory searched recursively for .off files")
    p.add_argument("--out", required=True)
    p.add_argument("--views", type=int, default=36)
    p.add_argument("--theta-step", type=float, default=10.0)
    p.add_argument("--phi", type=float, default=30.0, help="camera elevation in degrees")
    p.add_argument("--size", type=int, default=112)
    p.add_argument("--distance", type=float, default=4.0, help="camera distance in bounding radii")
    p.add_argument("--category", help="category for every mesh (default: parent directory name)")
    p.add_argument("--split", default="train", choices=("train", "test"))
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("synth", help="generate the synthetic primitive corpus")
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=112)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model on a corpus's train split")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--views", type=int, help="expected N; must match the checkpoint")
    p.add_argument("--interval", type=float)
    p.add_argument("--start", type=int)
    p.add_argument("--retrieval", action="store_true", help="also report retrieval mAP from Fc2 features")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep-views", help="test accuracy against number of views")
    _add_train_flags(p)
    p.add_argument("--views-list", type=_ints, required=True)
    p.add_argument("--repeats", type=int, default=3)
    p.set_defaults(func=cmd_sweep_views)

    p = sub.add_parser("verify", help="run built-in conformance checks")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (CommandError, ViewCountMismatch, *USAGE_ERRORS) as exc:
        print(f"mvc3d {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.debug("internal failure", exc_info=True)
        print(f"mvc3d {args.command}: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
