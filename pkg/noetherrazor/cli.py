"""
This module contains the ``noetherrazor`` command line.

Sub-commands generate data, train, evaluate, analyse learned symmetries,
export energy fields and print an environment report. Exit codes are 0 on
success, 2 for usage and validation errors, 3 for I/O errors and 4 when a
numerical routine aborts.
"""
import argparse
import dataclasses
import logging
import os
import sys
from typing import Any, Callable, Dict, List, Optional

from .analysis import analyze, default_bank_size
from .config import DEFAULT_BODIES, RunConfig, available_presets
from .dynamics import SYSTEM_KINDS, VARIANTS, Dataset, SystemSpec, sample_dataset
from .errors import NumericalError, TrainingAborted
from .export import analytic_field_grid, learned_field_grid, write_field_csv, write_vtk
from .utils import LOG, write_json
from .variational import TRAIN_MODES, Checkpoint, evaluate, horizon_mse, train

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NUMERICAL = 4


def _csv_metadata(config: Dict[str, Any], seed: Optional[int]) -> Dict[str, Any]:
    return {"config": config, "seed": seed}


def _system_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    return {"kind": args.system, "n": args.n, "d": args.dim}


def _resolve(args: argparse.Namespace, overrides: Dict[str, Dict[str, Any]]) -> RunConfig:
    return RunConfig.resolve(args.preset, args.config, overrides)


def cmd_generate(args: argparse.Namespace) -> int:
    """Simulate a dataset and write it as JSON."""
    config = _resolve(
        args,
        {
            "system": _system_overrides(args),
            "data": {"dt": args.dt, "seed": args.seed},
        },
    )
    recipe = config.recipe(args.variant)
    explicit = {"n_traj": args.trajectories, "points_per_traj": args.points}
    recipe = dataclasses.replace(
        recipe, **{k: v for k, v in explicit.items() if v is not None}
    )
    spec = config.system_spec()
    seed = config.seed()
    dataset = sample_dataset(spec, recipe, seed)
    dataset.config = config.to_dict()
    dataset.save(args.out)
    print(
        f"wrote {dataset.n_pairs} pairs of {spec.label} [{recipe.variant}] "
        f"({recipe.n_traj} trajectories x {recipe.points_per_traj - 1} steps, "
        f"dt={recipe.dt}, seed={seed}) to {args.out}"
    )
    return EXIT_OK


def _print_metrics(checkpoint: Checkpoint) -> None:
    metrics = checkpoint.final_metrics()
    names = ("train_mse", "nll", "kl", "neg_elbo")
    print("{:>14} {:>14} {:>14} {:>14}".format("Train MSE", "NLL/N", "KL/N", "-ELBO/N"))
    print(
        " ".join(
            "{:>14}".format("nan" if metrics[k] is None else f"{metrics[k]:.6g}")
            for k in names
        )
    )


def cmd_train(args: argparse.Namespace) -> int:
    """Train a model on a dataset and write the checkpoint."""
    dataset = Dataset.load(args.data)
    preset = args.preset
    if args.system is not None:
        if args.system != dataset.spec.kind:
            raise ValueError(
                f"--system {args.system} does not match the dataset system {dataset.spec.label}"
            )
        if preset is None:
            preset = f"{args.system}-desk"
    config = RunConfig.resolve(preset, args.config, {"system": dataset.spec.to_dict()})
    train_section = config.sections["train"]
    k = args.k
    if k is None and "k" not in train_section:
        k = default_bank_size(dataset.spec)
    train_config = config.train_config(
        mode=args.mode,
        k=k,
        epochs=args.epochs,
        n_tau=args.tau_samples,
        batch_traj=args.batch,
        lr=args.lr,
        seed=args.seed,
        threads=args.threads,
    )
    resolved = config.merged({"train": train_config.to_dict()})
    arch = resolved.architecture(dataset.phase_dim)
    try:
        checkpoint = train(dataset, train_config, arch, dataset.spec, resolved.to_dict())
    except TrainingAborted as exc:
        if exc.checkpoint is not None:
            path = f"{os.path.splitext(args.out)[0]}.last-good.json"
            exc.checkpoint.save(path)
            print(f"training aborted: {exc}; last good checkpoint written to {path}")
        raise
    checkpoint.save(args.out)
    _print_metrics(checkpoint)
    print(f"wrote checkpoint to {args.out}")
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    """Report the one-step test MSE of a checkpoint on one or more datasets."""
    checkpoint = Checkpoint.load(args.checkpoint)
    seed = checkpoint.config.seed if args.seed is None else args.seed
    n_tau = checkpoint.config.n_tau if args.tau_samples is None else args.tau_samples
    results = []
    for path in args.data:
        dataset = Dataset.load(path)
        entry: Dict[str, Any] = {
            "path": path,
            "variant": None if dataset.recipe is None else dataset.recipe.variant,
            "n_pairs": dataset.n_pairs,
            "test_mse": evaluate(checkpoint, dataset, n_tau, seed),
        }
        if args.horizon:
            entry["horizon_mse"] = horizon_mse(
                checkpoint, dataset, args.horizon, n_tau, seed
            )
        print(f"{path}: Test MSE {entry['test_mse']:.6g} over {dataset.n_pairs} pairs")
        results.append(entry)
    write_json(
        args.out,
        {
            "checkpoint": args.checkpoint,
            "tau_samples": n_tau,
            "seed": seed,
            "datasets": results,
            "config": checkpoint.run_config,
        },
    )
    return EXIT_OK


def _analysis_spec(args: argparse.Namespace, checkpoint: Checkpoint) -> SystemSpec:
    if args.system is None:
        if checkpoint.spec is None:
            raise ValueError("The checkpoint has no system; pass --system.")
        return checkpoint.spec
    default_n = DEFAULT_BODIES if args.system == "nbody" else 1
    return SystemSpec(kind=args.system, n=args.n or default_n, d=args.dim or 2)


def cmd_analyze(args: argparse.Namespace) -> int:
    """Compare the learned bank of a checkpoint with the known conserved quantities."""
    checkpoint = Checkpoint.load(args.checkpoint)
    spec = _analysis_spec(args, checkpoint)
    report = analyze(checkpoint.bank, spec, args.threshold)
    report.save(args.out, checkpoint.run_config, checkpoint.config.seed)
    csv_path = args.csv or f"{os.path.splitext(args.out)[0]}.csv"
    report.save_csv(csv_path, _csv_metadata(checkpoint.run_config, checkpoint.config.seed))
    if not report.singular_values:
        print(f"{spec.label}: no bank ({'; '.join(report.notes)})")
    else:
        values = ", ".join(f"{v:.4g}" for v in report.singular_values)
        print(
            f"{spec.label}: {report.active_count} active of {len(report.singular_values)} "
            f"(ground truth {report.truth_dim}); singular values [{values}]"
        )
    return EXIT_OK


def cmd_field(args: argparse.Namespace) -> int:
    """Export the energy over a grid of the two-dimensional phase space."""
    lo, hi = args.range
    if not lo < hi:
        raise ValueError(f"--range needs lo < hi, got {lo} {hi}")
    if args.analytic:
        spec = SystemSpec(kind=args.system or "sho")
        grid = analytic_field_grid(spec, lo, hi, args.resolution)
        metadata = _csv_metadata({"system": spec.to_dict()}, None)
    else:
        if args.checkpoint is None:
            raise ValueError("field export needs --checkpoint or --analytic")
        checkpoint = Checkpoint.load(args.checkpoint)
        seed = checkpoint.config.seed if args.seed is None else args.seed
        grid = learned_field_grid(checkpoint, lo, hi, args.resolution, args.tau_samples, seed)
        metadata = _csv_metadata(checkpoint.run_config, seed)
        metadata["tau_samples"] = args.tau_samples
    write_field_csv(args.out, grid, metadata)
    print(f"wrote {args.resolution ** 2} grid points to {args.out}")
    if args.vtk:
        write_vtk(args.vtk, grid)
        print(f"wrote VTK grid to {args.vtk}")
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:  # pylint: disable=unused-argument
    """Print the versions of the packages in use."""
    from .report import Report  # pylint: disable=import-outside-toplevel

    print(Report())
    return EXIT_OK


def _add_config_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--preset", choices=available_presets(), help="Named configuration to start from"
    )
    parser.add_argument("--config", help="TOML file layered over the preset")


def _add_system_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--system", choices=SYSTEM_KINDS, help="Ground-truth system")
    parser.add_argument("--n", type=int, help="Number of oscillators or bodies")
    parser.add_argument("--dim", type=int, help="Spatial dimension of the bodies")


def build_parser() -> argparse.ArgumentParser:
    """Return the argument parser of the command line."""
    parser = argparse.ArgumentParser(
        prog="noetherrazor",
        description="Learn Hamiltonians together with their conserved quantities.",
    )
    parser.add_argument(
        "-v", "--verbose", action="count", default=0, help="More logging (repeatable)"
    )
    parser.add_argument("-q", "--quiet", action="store_true", help="Only log errors")
    subparsers = parser.add_subparsers(dest="command", required=True)

    gen = subparsers.add_parser("generate", help="Simulate a dataset")
    _add_system_args(gen)
    _add_config_args(gen)
    gen.add_argument("--variant", choices=VARIANTS, default="train")
    gen.add_argument("--trajectories", type=int, help="Number of trajectories")
    gen.add_argument("--points", type=int, help="Points per trajectory")
    gen.add_argument("--dt", type=float, help="Time gap between points")
    gen.add_argument("--seed", type=int, help="Random seed")
    gen.add_argument("--out", required=True, help="Dataset JSON to write")
    gen.set_defaults(func=cmd_generate)

    trn = subparsers.add_parser("train", help="Train a model")
    trn.add_argument(
        "--system",
        choices=SYSTEM_KINDS,
        help="Start from the desk preset of this system when --preset is not given",
    )
    _add_config_args(trn)
    trn.add_argument("--data", required=True, help="Training dataset JSON")
    trn.add_argument("--mode", choices=TRAIN_MODES, help="Symmetry mode")
    trn.add_argument("--k", type=int, help="Number of learned observables")
    trn.add_argument("--epochs", type=int)
    trn.add_argument("--tau-samples", type=int, help="Symmetry samples per step")
    trn.add_argument("--batch", type=int, help="Trajectories per batch, 0 for all")
    trn.add_argument("--lr", type=float, help="Starting learning rate")
    trn.add_argument("--seed", type=int)
    trn.add_argument("--threads", type=int, help="Weight samples evaluated in parallel")
    trn.add_argument("--out", required=True, help="Checkpoint JSON to write")
    trn.set_defaults(func=cmd_train)

    evl = subparsers.add_parser("evaluate", help="Test MSE of a checkpoint")
    evl.add_argument("--checkpoint", required=True)
    evl.add_argument("--data", required=True, nargs="+", help="Dataset JSON files")
    evl.add_argument(
        "--tau-samples", type=int, help="Symmetry samples, the training count by default"
    )
    evl.add_argument("--seed", type=int, help="Seed of the symmetry samples")
    evl.add_argument("--horizon", type=int, default=0, help="Chained prediction steps")
    evl.add_argument("--out", required=True, help="Report JSON to write")
    evl.set_defaults(func=cmd_evaluate)

    ana = subparsers.add_parser("analyze", help="Identify learned symmetries")
    ana.add_argument("--checkpoint", required=True)
    _add_system_args(ana)
    ana.add_argument("--threshold", type=float, default=0.05)
    ana.add_argument("--out", required=True, help="Report JSON to write")
    ana.add_argument("--csv", help="CSV to write, next to the report by default")
    ana.set_defaults(func=cmd_analyze)

    fld = subparsers.add_parser("field", help="Export the energy on a grid")
    fld.add_argument("--checkpoint")
    fld.add_argument("--analytic", action="store_true", help="Use the true energy")
    fld.add_argument("--system", choices=("sho",), help="System of the analytic field")
    fld.add_argument("--range", type=float, nargs=2, default=(-3.0, 3.0), metavar=("LO", "HI"))
    fld.add_argument("--resolution", type=int, default=50)
    fld.add_argument("--tau-samples", type=int, default=200)
    fld.add_argument("--seed", type=int)
    fld.add_argument("--out", required=True, help="CSV to write")
    fld.add_argument("--vtk", help="Also write a VTK structured grid (needs pyvista)")
    fld.set_defaults(func=cmd_field)

    rep = subparsers.add_parser("report", help="Print the environment report")
    rep.set_defaults(func=cmd_report)
    return parser


def _set_verbosity(verbose: int, quiet: bool) -> None:
    if quiet:
        LOG.setLevel(logging.ERROR)
    elif verbose >= 2:
        LOG.setLevel(logging.DEBUG)
    elif verbose == 1:
        LOG.setLevel(logging.INFO)


def main(argv: Optional[List[str]] = None) -> int:
    """Run the command line and return its exit code."""
    parser = build_parser()
    args = parser.parse_args(argv)
    _set_verbosity(args.verbose, args.quiet)
    handler: Callable[[argparse.Namespace], int] = args.func
    try:
        return handler(args)
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except RuntimeError as exc:
        # missing optional dependency
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, TypeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
