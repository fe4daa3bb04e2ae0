"""Command-line front end: simulate, train, reconstruct, gradcheck, sweep.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Values resolve as flag > ``--config`` file (key = value lines) > built-in
default, and the effective configuration is written to ``config.txt`` in
every output directory.
"""
from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import container
from .data import DatasetManifest, PROJECTORS, simulate_dataset, subsample_views
from .evaluate import DIFF_WINDOW, DISPLAY_WINDOW, compare_sweep, save_display, window_map
from .geometry import (GeometryError, ImagingGeometry, default_n_det, geometry_from_mapping,
                       load_geometry_config, parse_key_values, build_bp_table)
from .gradcheck import LAYERS, run_suite
from .layers import BP_GRANULARITIES, IRadonMap
from .train import NumericalError, TrainingConfig, load_checkpoint, train
from .transform import fbp

log = logging.getLogger("iradonmap")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# key: (type, default, validator description, validator)
FIELDS = {
    "n_x": (int, 64, ">= 1", lambda v: v >= 1),
    "n_y": (int, None, ">= 1 (default n_x)", lambda v: v >= 1),
    "pixel_size": (float, 1.0, "> 0", lambda v: v > 0),
    "n_views": (int, 90, ">= 1", lambda v: v >= 1),
    "n_det": (int, None, ">= 1 (default covers the diagonal)", lambda v: v >= 1),
    "det_spacing": (float, 1.0, "> 0", lambda v: v > 0),
    "angle_mode": (str, "uniform", "uniform | subsample:<views>:<k>", lambda v: True),
    "minibatch_size": (int, 2, ">= 1", lambda v: v >= 1),
    "learning_rate": (float, 2e-5, ">= 0", lambda v: v >= 0),
    "rho": (float, 0.9, "in (0, 1)", lambda v: 0 < v < 1),
    "epsilon": (float, 1e-8, "> 0", lambda v: v > 0),
    "weight_decay": (float, 0.0, ">= 0", lambda v: v >= 0),
    "n_iterations": (int, 500, ">= 0", lambda v: v >= 0),
    "seed": (int, 0, "any integer", lambda v: True),
    "checkpoint_interval": (int, 100, ">= 0", lambda v: v >= 0),
    "val_interval": (int, 100, ">= 0", lambda v: v >= 0),
    "channels": (int, 32, ">= 1", lambda v: v >= 1),
    "blocks": (int, 4, ">= 0", lambda v: v >= 0),
    "bp_granularity": (str, "pixel_view", " | ".join(BP_GRANULARITIES), lambda v: v in BP_GRANULARITIES),
    "view_factor": (int, 1, ">= 1", lambda v: v >= 1),
    "n_train": (int, 200, ">= 0", lambda v: v >= 0),
    "n_val": (int, 20, ">= 0", lambda v: v >= 0),
    "n_test": (int, 0, ">= 0", lambda v: v >= 0),
    "projector": (str, "siddon", " | ".join(PROJECTORS), lambda v: v in PROJECTORS),
    "threads": (int, 1, ">= 1", lambda v: v >= 1),
}
GEOMETRY_KEYS = ("n_x", "n_y", "pixel_size", "n_views", "n_det", "det_spacing", "angle_mode")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _opt(parser, flag, key, help_text, **kw):
    typ, default, accepted, _ = FIELDS[key]
    shown = "see description" if default is None else default
    parser.add_argument(flag, dest=key, type=typ, default=None,
                        help=f"{help_text} [{accepted}; default: {shown}]", **kw)


def _common(parser, geometry=False):
    parser.add_argument("--out", required=True, type=Path, help="output directory (created if missing)")
    parser.add_argument("--config", type=Path, default=None,
                        help="key = value file; flags override it, it overrides defaults [default: none]")
    _opt(parser, "--threads", "threads", "cap on BLAS/intra-op threads")
    if geometry:
        _opt(parser, "--size", "n_x", "image width in pixels")
        _opt(parser, "--height", "n_y", "image height in pixels")
        _opt(parser, "--views", "n_views", "number of view angles over [0, pi)")
        _opt(parser, "--det", "n_det", "detector bins")
        _opt(parser, "--pixel-size", "pixel_size", "pixel edge length")
        _opt(parser, "--det-spacing", "det_spacing", "detector bin spacing")


def resolve(args, keys) -> dict:
    """Merge defaults, config file and flags; validate each field."""
    file_values = {}
    if getattr(args, "config", None) is not None:
        try:
            file_values = parse_key_values(Path(args.config).read_text())
        except OSError as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        except GeometryError as exc:
            raise UsageError(f"config {args.config}: {exc}") from exc
        unknown = set(file_values) - set(FIELDS)
        if unknown:
            raise UsageError(f"config {args.config}: unknown keys {sorted(unknown)}")
    out = {}
    for key in keys:
        typ, default, accepted, ok = FIELDS[key]
        value = getattr(args, key, None)
        if value is None and key in file_values:
            try:
                value = typ(file_values[key])
            except ValueError:
                raise UsageError(f"{key}={file_values[key]!r} is not a valid {typ.__name__}") from None
        if value is None:
            value = default
        if value is not None and not ok(value):
            raise UsageError(f"{key}={value!r} out of range, accepted: {accepted}")
        out[key] = value
    return out


def _geometry(cfg) -> ImagingGeometry:
    values = {k: cfg[k] for k in GEOMETRY_KEYS if cfg.get(k) is not None}
    try:
        return geometry_from_mapping(values)
    except GeometryError as exc:
        raise UsageError(str(exc)) from exc


def _echo_config(out_dir: Path, cfg: dict, extra: dict | None = None) -> None:
    lines = [f"{k} = {v}" for k, v in cfg.items() if v is not None]
    lines += [f"{k} = {v}" for k, v in (extra or {}).items()]
    (out_dir / "config.txt").write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    cfg = resolve(args, GEOMETRY_KEYS + ("n_train", "n_val", "n_test", "projector", "seed", "threads"))
    geometry = _geometry(cfg)
    pngs = [Path(p) for p in args.png]
    total = cfg["n_train"] + cfg["n_val"] + cfg["n_test"] + len(pngs) + int(args.shepp_logan)
    args.out.mkdir(parents=True, exist_ok=True)
    manifest = simulate_dataset(args.out, geometry, n_train=cfg["n_train"], n_val=cfg["n_val"],
                                n_test=cfg["n_test"], shepp_logan=args.shepp_logan, images=pngs,
                                image_split=args.png_split, projector=cfg["projector"], seed=cfg["seed"])
    _echo_config(args.out, cfg)
    if total == 0:
        log.warning("no images requested; wrote an empty manifest")
    elif len(manifest) < total:
        log.warning("%d of %d items failed and were skipped", total - len(manifest), total)
    print(f"wrote {len(manifest)} entries to {manifest.path} "
          f"(sinograms {geometry.n_views}x{geometry.n_det}, images {geometry.n_y}x{geometry.n_x})")
    return EXIT_OK


def _read_manifest(path) -> DatasetManifest:
    try:
        return DatasetManifest.read(path)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot load manifest {path}: {exc}") from exc


def cmd_train(args) -> int:
    keys = ("minibatch_size", "learning_rate", "rho", "epsilon", "weight_decay", "n_iterations", "seed",
            "checkpoint_interval", "val_interval", "channels", "blocks", "bp_granularity", "view_factor",
            "threads")
    cfg = resolve(args, keys)
    manifest = _read_manifest(args.manifest)
    try:
        sinos, images = manifest.load("train")
        val = manifest.load("val") if manifest.split("val") else None
        sinos, geometry = subsample_views(sinos, manifest.geometry, cfg["view_factor"])
        if val is not None:
            val = (subsample_views(val[0], manifest.geometry, cfg["view_factor"])[0], val[1])
    except (OSError, ValueError) as exc:
        raise DataError(str(exc)) from exc
    if len(sinos) == 0:
        raise DataError(f"manifest {manifest.path} has no training entries")
    tcfg = TrainingConfig(cfg["minibatch_size"], cfg["learning_rate"], cfg["rho"], cfg["epsilon"],
                          cfg["weight_decay"], cfg["n_iterations"], cfg["seed"], cfg["checkpoint_interval"])
    model = IRadonMap(geometry, cfg["channels"], cfg["blocks"], cfg["bp_granularity"], seed=cfg["seed"])
    args.out.mkdir(parents=True, exist_ok=True)
    _echo_config(args.out, cfg, {"manifest": Path(args.manifest).resolve(), "n_views": geometry.n_views})
    result = train(model, sinos, images, tcfg, out_dir=args.out, val=val, val_interval=cfg["val_interval"])
    if result.halted:
        print(f"training halted: {result.halted}; last good checkpoint {result.checkpoints[-1]}",
              file=sys.stderr)
        return EXIT_NUMERIC
    final = result.checkpoints[-1]
    msg = f"trained {tcfg.n_iterations} iterations at {geometry.n_views} views; final checkpoint {final}"
    if result.val_mse:
        msg += f"; val mse {result.val_mse[0][1]:.3e} -> {result.val_mse[-1][1]:.3e}"
    print(msg)
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    cfg = resolve(args, ("threads",))
    if args.method == "iradonmap" and args.checkpoint is None:
        raise UsageError("--method iradonmap requires --checkpoint")
    try:
        sino = container.load_tensor(args.sino)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read sinogram {args.sino}: {exc}") from exc
    if sino.ndim != 2:
        raise DataError(f"expected a 2-D sinogram, got shape {sino.shape}")
    model = None
    if args.checkpoint is not None:
        try:
            model = load_checkpoint(args.checkpoint)[0]
        except (OSError, ValueError, KeyError) as exc:
            raise DataError(f"cannot read checkpoint {args.checkpoint}: {exc}") from exc
    if args.geometry is not None:
        try:
            geometry = load_geometry_config(args.geometry)
        except (OSError, GeometryError) as exc:
            raise DataError(f"cannot read geometry {args.geometry}: {exc}") from exc
    elif model is not None:
        geometry = model.geometry
    else:
        n_views, n_det = sino.shape
        size = args.size or max(1, int(n_det / math.sqrt(2)))
        geometry = ImagingGeometry(size, size, n_views, n_det)
    if sino.shape != geometry.sino_shape:
        raise DataError(f"sinogram {sino.shape} does not match geometry {geometry.sino_shape}")
    if args.method == "iradonmap":
        if model.geometry != geometry:
            raise DataError("checkpoint geometry differs from the requested geometry")
        image = model(sino)
    else:
        image = fbp(sino.astype(np.float64), build_bp_table(geometry)).astype(np.float32)
    args.out.mkdir(parents=True, exist_ok=True)
    stem = args.out / args.method
    container.save_tensor(stem.with_suffix(".irdm"), image.astype(np.float32))
    save_display(stem.with_suffix(".pgm"), window_map(image, *args.window, bits=16))
    save_display(stem.with_suffix(".png"), window_map(image, *args.window))
    _echo_config(args.out, cfg, {"method": args.method, "sino": Path(args.sino).resolve(),
                                 "checkpoint": args.checkpoint, "window": list(args.window)})
    print(f"wrote {stem}.irdm/.pgm/.png")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = resolve(args, ("seed", "threads"))
    results = run_suite(args.instances, cfg["seed"], corrupt=args.corrupt)
    args.out.mkdir(parents=True, exist_ok=True)
    lines = ["layer,instances,max_rel_error,tolerance,passed"]
    print(f"{'layer':<10} {'instances':>9} {'max rel err':>12} {'tol':>8}  verdict")
    for r in results:
        verdict = "pass" if r.passed else "FAIL"
        print(f"{r.layer:<10} {r.instances:>9} {r.max_error:>12.3e} {r.tolerance:>8.0e}  {verdict}")
        lines.append(f"{r.layer},{r.instances},{r.max_error!r},{r.tolerance!r},{r.passed}")
    (args.out / "gradcheck.csv").write_text("\n".join(lines) + "\n")
    _echo_config(args.out, cfg, {"instances": args.instances, "corrupt": args.corrupt})
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERIC


def cmd_sweep(args) -> int:
    cfg = resolve(args, ("threads",))
    manifest = _read_manifest(args.manifest)
    split = args.split or ("test" if manifest.split("test") else "val")
    try:
        factors = [int(f) for f in args.factors.split(",") if f.strip()]
    except ValueError:
        raise UsageError(f"--factors must be comma-separated integers, got {args.factors!r}") from None
    if not factors or min(factors) < 1:
        raise UsageError("--factors needs at least one integer >= 1")
    models = []
    for path in args.checkpoint:
        try:
            models.append(load_checkpoint(path)[0])
        except (OSError, ValueError, KeyError) as exc:
            raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    try:
        sinos, images = manifest.load(split)
        report = compare_sweep(manifest.ids(split), sinos, images, manifest.geometry, models, factors,
                               out_dir=args.out, window=tuple(args.window), diff_window=tuple(args.diff_window))
    except (GeometryError, ValueError, OSError) as exc:
        raise DataError(str(exc)) from exc
    args.out.mkdir(parents=True, exist_ok=True)
    if not report.rows:
        report.to_csv(args.out / "report.csv")
        log.warning("split %r is empty; wrote an empty report", split)
    _echo_config(args.out, cfg, {"manifest": Path(args.manifest).resolve(), "split": split,
                                 "factors": args.factors, "checkpoints": [str(p) for p in args.checkpoint]})
    for (views, method), (m, p) in report.means().items():
        print(f"{views:>5} views  {method:<10} mean mse {m:.3e}  mean psnr {p:6.2f} dB")
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="iradonmap", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging [default: off]")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="generate phantoms or ingest PNGs and project them")
    _common(p, geometry=True)
    _opt(p, "--phantoms", "n_train", "random ellipse phantoms in the train split")
    _opt(p, "--val", "n_val", "random phantoms in the val split")
    _opt(p, "--test", "n_test", "random phantoms in the test split")
    _opt(p, "--projector", "projector", "forward projector for the sinograms")
    _opt(p, "--seed", "seed", "PRNG seed")
    p.add_argument("--shepp-logan", action="store_true", help="append the Shepp-Logan phantom to test [default: off]")
    p.add_argument("--png", nargs="*", default=[], help="PNG files to ingest [default: none]")
    p.add_argument("--png-split", default="test", choices=("train", "val", "test"),
                   help="split tag for ingested PNGs [default: test]")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train an iRadonMap model on a manifest's train split")
    _common(p)
    p.add_argument("--manifest", required=True, type=Path, help="manifest.tsv or its directory")
    _opt(p, "--iters", "n_iterations", "RMSProp iterations")
    _opt(p, "--lr", "learning_rate", "learning rate")
    _opt(p, "--batch", "minibatch_size", "minibatch size")
    _opt(p, "--rho", "rho", "squared-gradient decay")
    _opt(p, "--eps", "epsilon", "RMSProp epsilon")
    _opt(p, "--weight-decay", "weight_decay", "L2 weight decay added to the gradient")
    _opt(p, "--seed", "seed", "seed for init and minibatch order")
    _opt(p, "--ckpt-interval", "checkpoint_interval", "iterations between checkpoints (0: first/last only)")
    _opt(p, "--val-interval", "val_interval", "iterations between validation passes (0: first/last only)")
    _opt(p, "--channels", "channels", "refiner width")
    _opt(p, "--blocks", "blocks", "refiner residual blocks")
    _opt(p, "--bp-granularity", "bp_granularity", "back-projection weight sharing")
    _opt(p, "--view-factor", "view_factor", "train on every k-th view of the manifest sinograms")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("reconstruct", help="reconstruct one IRDM1 sinogram")
    _common(p)
    p.add_argument("--sino", required=True, type=Path, help="IRDM1 sinogram (n_views x n_det)")
    p.add_argument("--method", choices=("fbp", "iradonmap"), default="fbp", help="[default: fbp]")
    p.add_argument("--checkpoint", type=Path, default=None, help="model checkpoint (iradonmap) [default: none]")
    p.add_argument("--geometry", type=Path, default=None,
                   help="geometry key = value file [default: checkpoint geometry, else inferred]")
    p.add_argument("--size", type=int, default=None,
                   help="image size when inferring geometry [default: n_det / sqrt(2)]")
    p.add_argument("--window", type=float, nargs=2, default=list(DISPLAY_WINDOW), metavar=("LO", "HI"),
                   help=f"display window [default: {DISPLAY_WINDOW[0]} {DISPLAY_WINDOW[1]}]")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("gradcheck", help="finite-difference check of every backward pass")
    _common(p)
    _opt(p, "--seed", "seed", "seed for the random instances")
    p.add_argument("--instances", type=int, default=20, help="random instances per layer [default: 20]")
    p.add_argument("--corrupt", choices=LAYERS, default=None,
                   help="test hook: scale one layer's analytic gradient by 1.01 [default: none]")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("sweep", help="FBP vs iRadonMap over view subsampling factors")
    _common(p)
    p.add_argument("--manifest", required=True, type=Path, help="manifest.tsv or its directory")
    p.add_argument("--checkpoint", type=Path, action="append", default=[],
                   help="checkpoint per view count (repeatable) [default: none]")
    p.add_argument("--factors", default="1", help="comma-separated view subsampling factors [default: 1]")
    p.add_argument("--split", default=None, help="split to evaluate [default: test, else val]")
    p.add_argument("--window", type=float, nargs=2, default=list(DISPLAY_WINDOW), metavar=("LO", "HI"),
                   help=f"reconstruction window [default: {DISPLAY_WINDOW[0]} {DISPLAY_WINDOW[1]}]")
    p.add_argument("--diff-window", type=float, nargs=2, default=list(DIFF_WINDOW), metavar=("LO", "HI"),
                   help=f"difference window [default: {DIFF_WINDOW[0]} {DIFF_WINDOW[1]}]")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        threads = resolve(args, ("threads",))["threads"]
        with threadpool_limits(limits=threads):
            return args.func(args)
    except UsageError as exc:
        print(f"iradonmap {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"iradonmap {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"iradonmap {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
