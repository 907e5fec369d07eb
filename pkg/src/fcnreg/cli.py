"""Command-line entry point: ``fcnreg <subcommand> [flags]``.

Exit status is 0 on success, 1 for invalid input (bad flags, missing or
malformed files, mismatched dims) and 2 for runtime or numerical failures.
Every output file is written to a temporary sibling and renamed into place,
so a failed command never leaves a partial file behind.
"""
from __future__ import annotations

import argparse
import contextlib
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

from threadpoolctl import threadpool_limits

from . import io as vio
from .checks import run_suite
from .evaluation import EvalPair, evaluate_pairs, metrics_csv
from .losses import DEFAULT_LAMBDA, LossWeights
from .network import ArchitectureConfig, load_model, save_model
from .synth import SynthParams, make_corpus
from .training import (
    DirectConfig,
    preset,
    register_direct,
    register_infer,
    train_network,
    training_log_csv,
)
from .volume import DisplacementField, Volume
from .warp import warp_nearest, warp_trilinear

log = logging.getLogger("fcnreg")

VOLUME_NAMES = ("base", "fixed", "moving", "truth")
LABEL_NAMES = ("fixed_labels", "moving_labels")


class UsageError(ValueError):
    """Invalid command line."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _dims(text: str) -> tuple:
    try:
        dims = tuple(int(p) for p in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected D,H,W integers, got {text!r}") from None
    if len(dims) != 3 or min(dims) < 1:
        raise argparse.ArgumentTypeError(f"expected three positive integers, got {text!r}")
    return dims


def _pair_of_floats(text: str) -> tuple:
    try:
        lo, hi = (float(p) for p in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected LO,HI, got {text!r}") from None
    return lo, hi


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    common.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=True,
                        help="single-threaded math for bit-identical reruns (default on)")
    common.add_argument("--log", type=Path, default=None, help="append log messages to this file")

    parser = _Parser(prog="fcnreg", description="Unsupervised deformable registration toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="write synthetic registration pairs")
    p.add_argument("--dims", type=_dims, default=(32, 48, 48), help="D,H,W (default 32,48,48)")
    p.add_argument("--count", type=int, default=20, help="number of pairs (default 20)")
    p.add_argument("--max-amp", type=float, default=3.0, help="peak displacement in voxels (3)")
    p.add_argument("--blobs", type=int, default=6, help="Gaussian bumps per field (default 6)")
    p.add_argument("--sigma", type=_pair_of_floats, default=(3.0, 6.0),
                   help="bump width range LO,HI in voxels (default 3,6)")
    p.add_argument("--labels", action="store_true", help="also write thresholded label maps")
    p.add_argument("--out", type=Path, required=True, help="output directory")

    p = sub.add_parser("train", parents=[common], help="train a registration network")
    p.add_argument("--data", type=Path, required=True, help="directory written by synth")
    p.add_argument("--arch", default="multires", choices=["multires", "nopool", "coarse"])
    p.add_argument("--preset", default="desk", choices=["desk", "paper"])
    p.add_argument("--iters", type=int, default=None, help="override preset iterations")
    p.add_argument("--batch", type=int, default=None, help="override preset batch size")
    p.add_argument("--lr", type=float, default=None, help="override learning rate (1e-3)")
    p.add_argument("--lambda", dest="lam", type=float, default=None,
                   help=f"TV weight (default {DEFAULT_LAMBDA:g})")
    p.add_argument("--weights", default=None, help="coarse,mid,fine loss weights (1,0.6,0.3)")
    p.add_argument("--loss-csv", type=Path, default=None,
                   help="per-iteration loss log (default <out>.loss.csv)")
    p.add_argument("--out", type=Path, required=True, help="model file to write")

    p = sub.add_parser("register", parents=[common], help="register one pair")
    mode = p.add_mutually_exclusive_group(required=True)
    mode.add_argument("--model", type=Path, help="trained model file")
    mode.add_argument("--direct", action="store_true", help="optimise the field directly")
    p.add_argument("--fixed", type=Path, required=True)
    p.add_argument("--moving", type=Path, required=True)
    p.add_argument("--iters", type=int, default=None, help="direct: iterations (300)")
    p.add_argument("--lr", type=float, default=None, help="direct: Adam step size (0.02)")
    p.add_argument("--lambda", dest="lam", type=float, default=None,
                   help="direct: TV weight (0.01)")
    p.add_argument("--out-field", type=Path, required=True)

    p = sub.add_parser("warp", parents=[common], help="apply a displacement field")
    p.add_argument("--in", dest="input", type=Path, required=True)
    p.add_argument("--field", type=Path, required=True)
    p.add_argument("--nearest", action="store_true", help="nearest-neighbour (label maps)")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("eval", parents=[common], help="score registrations to a metrics CSV")
    p.add_argument("--pairs", type=Path, required=True, help="directory of pair_* folders")
    mode = p.add_mutually_exclusive_group(required=True)
    mode.add_argument("--model", type=Path)
    mode.add_argument("--direct", action="store_true")
    p.add_argument("--labels", type=Path, default=None,
                   help="directory with <pair>/fixed_labels and <pair>/moving_labels")
    p.add_argument("--truth", type=Path, default=None, help="directory with <pair>/truth")
    p.add_argument("--iters", type=int, default=None, help="direct: iterations")
    p.add_argument("--lr", type=float, default=None, help="direct: step size")
    p.add_argument("--lambda", dest="lam", type=float, default=None, help="direct: TV weight")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    p.add_argument("--tol", type=float, default=1e-3)
    p.add_argument("--cases", type=int, default=5, help="seeded cases per op (default 5)")
    return parser


# -- helpers ----------------------------------------------------------------

def _read(path: Path, kind: type):
    obj = vio.read_volume(path)
    if not isinstance(obj, kind):
        what = "a displacement field" if kind is DisplacementField else "an image volume"
        raise ValueError(f"{path}: expected {what}")
    return obj


def _pair_dirs(root: Path) -> list:
    if not root.is_dir():
        raise FileNotFoundError(f"pairs directory not found: {root}")
    dirs = sorted(p for p in root.iterdir() if p.is_dir() and p.name.startswith("pair_"))
    if not dirs:
        raise ValueError(f"{root} contains no pair_* directories (run synth first)")
    return dirs


def _check_same_dims(fixed: Volume, moving: Volume) -> None:
    if fixed.dims != moving.dims:
        raise ValueError(f"fixed dims {'x'.join(map(str, fixed.dims))} and moving dims "
                         f"{'x'.join(map(str, moving.dims))} differ")


def _direct_config(args) -> DirectConfig:
    base = DirectConfig()
    return DirectConfig(lam=base.lam if args.lam is None else args.lam,
                        learning_rate=base.learning_rate if args.lr is None else args.lr,
                        iterations=base.iterations if args.iters is None else args.iters)


# -- subcommands ------------------------------------------------------------

def cmd_synth(args) -> int:
    if args.count < 1:
        raise ValueError("--count must be >= 1")
    params = SynthParams(num_blobs=args.blobs, max_amplitude=args.max_amp,
                         sigma_range=args.sigma, seed=args.seed)
    cases = make_corpus(args.count, args.dims, params, labels=args.labels)
    for i, case in enumerate(cases):
        folder = args.out / f"pair_{i:04d}"
        for name in VOLUME_NAMES + (LABEL_NAMES if args.labels else ()):
            vio.write_volume(folder / name, getattr(case, name))
    log.info("wrote %d pairs to %s", len(cases), args.out)
    print(f"wrote {len(cases)} pairs of {'x'.join(map(str, args.dims))} to {args.out}")
    return 0


def cmd_train(args) -> int:
    dirs = _pair_dirs(args.data)
    images, pairs = [], []
    for d in dirs:
        fixed, moving = _read(d / "fixed", Volume), _read(d / "moving", Volume)
        _check_same_dims(fixed, moving)
        pairs.append((len(images), len(images) + 1))
        images += [fixed, moving]
    dims = images[0].dims
    for img in images:
        if img.dims != dims:
            raise ValueError(f"training volumes differ in dims: {img.dims} vs {dims}")
    arch = ArchitectureConfig(args.arch, dims)
    lam = DEFAULT_LAMBDA if args.lam is None else args.lam
    weights = LossWeights.parse(args.weights, lam=lam) if args.weights else LossWeights(lam=lam)
    config = preset(args.preset, iterations=args.iters, batch_size=args.batch,
                    learning_rate=args.lr, seed=args.seed, weights=weights)
    log.info("training %s on %d pairs: %s", arch.variant, len(pairs), config)
    net, reports = train_network(images, arch, config, pairs=pairs)
    loss_csv = args.loss_csv or args.out.with_name(args.out.name + ".loss.csv")
    save_model(net, args.out)
    vio.atomic_write_text(loss_csv, training_log_csv(reports))
    final = reports[-1].total if reports else float("nan")
    print(f"trained {arch.variant} for {len(reports)} iterations, final loss {final:.6f}; "
          f"model -> {args.out}, log -> {loss_csv}")
    return 0


def cmd_register(args) -> int:
    fixed, moving = _read(args.fixed, Volume), _read(args.moving, Volume)
    _check_same_dims(fixed, moving)
    if args.direct:
        field, losses = register_direct(fixed, moving, config=_direct_config(args))
        log.info("direct registration: loss %.6f -> %.6f", losses[0] if losses else 0.0,
                 losses[-1] if losses else 0.0)
    else:
        net = load_model(args.model)
        if net.config.dims != fixed.dims:
            raise ValueError(f"model expects dims {'x'.join(map(str, net.config.dims))}, "
                             f"images are {'x'.join(map(str, fixed.dims))}")
        field = register_infer(net, fixed, moving)
    vio.write_volume(args.out_field, field)
    print(f"field -> {args.out_field}")
    return 0


def cmd_warp(args) -> int:
    vol, field = _read(args.input, Volume), _read(args.field, DisplacementField)
    if vol.dims != field.dims:
        raise ValueError(f"volume dims {vol.dims} and field dims {field.dims} differ")
    out = warp_nearest(vol, field) if args.nearest else warp_trilinear(vol, field)
    vio.write_volume(args.out, out)
    print(f"warped -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    pairs = []
    for d in _pair_dirs(args.pairs):
        pair = EvalPair(d.name, _read(d / "fixed", Volume), _read(d / "moving", Volume))
        if args.labels is not None:
            pair.fixed_labels = _read(args.labels / d.name / "fixed_labels", Volume)
            pair.moving_labels = _read(args.labels / d.name / "moving_labels", Volume)
        if args.truth is not None:
            pair.truth = _read(args.truth / d.name / "truth", DisplacementField)
        pairs.append(pair)
    if args.direct:
        config = _direct_config(args)

        def register(f, m):
            return register_direct(f, m, config=config)[0]
    else:
        net = load_model(args.model)

        def register(f, m):
            return register_infer(net, f, m)
    rows = evaluate_pairs(register, pairs)
    vio.atomic_write_text(args.out, metrics_csv(rows))
    failed = [r for r in rows if r.error]
    for r in failed:
        log.warning("pair %s failed: %s", r.pair_id, r.error)
    print(f"evaluated {len(rows)} pairs ({len(failed)} failed) -> {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    reports = run_suite(seed=args.seed, cases=args.cases, tol=args.tol,
                        progress=lambda r: print(f"{'PASS' if r.passed else 'FAIL'} "
                                                 f"{r.name}: max rel err {r.worst:.3e}",
                                                 flush=True))
    failed = [r.name for r in reports if not r.passed]
    if failed:
        print(f"gradient check failed for: {', '.join(failed)}")
        return 2
    print(f"all {len(reports)} ops under tol {args.tol:g}")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "register": cmd_register,
    "warp": cmd_warp,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
}

# UsageError, ModelFormatError and VolumeFormatError are ValueErrors
VALIDATION_ERRORS = (ValueError, FileNotFoundError, IsADirectoryError, NotADirectoryError)
RUNTIME_ERRORS = (ArithmeticError, RuntimeError, MemoryError, OSError)


def _thread_limit(deterministic: bool) -> Optional[int]:
    env = os.environ.get("REG_THREADS")
    if deterministic:
        return 1
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ValueError(f"REG_THREADS must be a positive integer, got {env!r}") from None
        if n < 1:
            raise ValueError(f"REG_THREADS must be a positive integer, got {env!r}")
        return n
    return None


def _setup_logging(path: Optional[Path]):
    handler = logging.FileHandler(path) if path else logging.NullHandler()
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger()
    root.addHandler(handler)
    root.setLevel(logging.INFO if path else logging.WARNING)
    return handler


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Parse ``argv``, run the subcommand and return its exit status."""
    handler = None
    try:
        args = build_parser().parse_args(argv)
        handler = _setup_logging(args.log)
        limit = _thread_limit(args.deterministic)
        ctx = threadpool_limits(limit) if limit else contextlib.nullcontext()
        with ctx:
            return COMMANDS[args.command](args)
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except RUNTIME_ERRORS as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    finally:
        if handler is not None:
            logging.getLogger().removeHandler(handler)
            handler.close()


def main() -> None:
    sys.exit(run())
