"""Command-line surface for the toolkit.

Subcommands: gen, baseline, eval, sweep, svd, report. Every subcommand is
deterministic given its flags; timestamps appear only in metadata fields.
Exit codes: 0 success, 2 usage or config error, 3 oracle failure,
4 data error.
"""

import argparse
import json
import os
import sys

from . import harness, metrics, perturb, svd
from .errors import ConfigError, GaborSenseError, OracleFailure
from .noise import AnisotropicNoiseParams, gabor_noise
from .oracle import build_reference_model, resolve_oracle
from .rng import SplitMix64, derive_seed

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_ORACLE = 3
EXIT_DATA = 4


def _parse_size(text: str) -> tuple[int, int]:
    """WIDTHxHEIGHT, or a single integer for a square field."""
    parts = text.lower().split("x")
    try:
        if len(parts) == 1:
            width = height = int(parts[0])
        elif len(parts) == 2:
            width, height = int(parts[0]), int(parts[1])
        else:
            raise ValueError
    except ValueError:
        raise ConfigError(f"--size must be N or WIDTHxHEIGHT, got {text!r}") from None
    if width < 1 or height < 1:
        raise ConfigError("--size dimensions must be >= 1")
    return width, height


def _write_field(paths: list[str], field: perturb.PerturbationField) -> None:
    for path in paths:
        if path.endswith(".png"):
            perturb.write_png(path, field)
        elif path.endswith(".gnp"):
            perturb.write_gnp(path, field)
        else:
            raise ConfigError(f"--out must end in .gnp or .png, got {path!r}")


def cmd_gen(args) -> int:
    width, height = _parse_size(args.size)
    try:
        params = AnisotropicNoiseParams(
            sigma=args.sigma,
            omega=args.omega,
            lambda_freq=getattr(args, "lambda"),
            kernel_size=args.kernel_size,
            seed=args.seed,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    noise = gabor_noise(params, width, height, density=args.density)
    provenance = {
        "kind": "gabor",
        "sigma": args.sigma,
        "omega": args.omega,
        "lambda": getattr(args, "lambda"),
        "kernel_size": args.kernel_size,
        "density": args.density,
        "mode": args.mode,
    }
    try:
        field = perturb.to_perturbation(
            noise, args.epsilon, mode=args.mode, provenance=provenance, seed=args.seed
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    _write_field(args.out, field)
    print(f"linf_norm = {perturb.linf_norm(field)!r}")
    return EXIT_OK


def cmd_baseline(args) -> int:
    width, height = _parse_size(args.size)
    try:
        field = perturb.random_uniform_perturbation(width, height, args.epsilon, args.seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    _write_field(args.out, field)
    print(f"linf_norm = {perturb.linf_norm(field)!r}")
    return EXIT_OK


def cmd_eval(args) -> int:
    field = perturb.read_gnp(args.perturbation)
    oracle = resolve_oracle(args.oracle_cmd)
    try:
        shape = oracle.descriptor.input_shape
        images, _ = harness.load_dataset(args.dataset, expected_shape=shape)
        if field.values.shape != tuple(shape):
            raise ConfigError(
                f"perturbation shape {field.values.shape} does not match "
                f"oracle input {tuple(shape)}"
            )
        usens = metrics.universal_sensitivity(oracle, images, field)
        uevas = metrics.universal_evasion(oracle, images, field)
    finally:
        close = getattr(oracle, "close", None)
        if close is not None:
            close()
    print(f"universal_sensitivity = {usens!r}")
    print(f"universal_evasion = {uevas!r}")
    if args.out:
        payload = {
            "perturbation": args.perturbation,
            "dataset": args.dataset,
            "oracle": args.oracle_cmd,
            "n_images": int(images.shape[0]),
            "universal_sensitivity": usens,
            "universal_evasion": uevas,
        }
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return EXIT_OK


_SWEEP_OVERRIDES = (
    ("n_perturbations", "n_perturbations"),
    ("dataset", "dataset_path"),
    ("n_images", "n_images"),
    ("epsilon", "epsilon"),
    ("kernel_size", "kernel_size"),
    ("density", "density"),
    ("master_seed", "master_seed"),
    ("mode", "mode"),
    ("out_dir", "out_dir"),
    ("jobs", "jobs"),
)


def cmd_sweep(args) -> int:
    cfg = harness.SweepConfig.from_json(args.config)
    overrides = {}
    for flag, field in _SWEEP_OVERRIDES:
        value = getattr(args, flag)
        if value is not None:
            overrides[field] = value
    if args.no_random_baseline:
        overrides["include_random_baseline"] = False
    if overrides:
        merged = cfg.to_jsonable()
        merged.update(overrides)
        merged["ranges"] = {k: tuple(v) for k, v in merged["ranges"].items()}
        cfg = harness.SweepConfig(**merged)
    result = harness.run_sweep(cfg)
    print(f"records = {len(result.records)}")
    print(f"records_csv = {result.records_path}")
    print(f"per_input_csv = {result.per_input_path}")
    print(f"report_json = {result.report_path}")
    return EXIT_OK


def cmd_svd(args) -> int:
    if args.layer not in svd.LAYERS:
        raise ConfigError(f"--layer must be one of {svd.LAYERS}, got {args.layer!r}")
    model = build_reference_model(args.model_seed)
    shape = model.descriptor.input_shape
    images, _ = harness.load_dataset(args.dataset, expected_shape=shape)
    if args.batch < 1:
        raise ConfigError("--batch must be >= 1")
    if args.batch < len(images):
        rng = SplitMix64(derive_seed(args.seed, 0xB))
        order = list(range(len(images)))
        for i in range(len(order) - 1, 0, -1):
            j = rng.next_u64() % (i + 1)
            order[i], order[j] = order[j], order[i]
        images = images[sorted(order[: args.batch])]
    cfg = svd.SingularConfig(
        p=args.p,
        q=args.q,
        epsilon=args.epsilon,
        tol=args.tol,
        max_iter=args.max_iter,
        seed=args.seed,
    )
    field = svd.singular_uap(model, args.layer, images, cfg)
    _write_field(args.out, field)
    print(f"linf_norm = {perturb.linf_norm(field)!r}")
    print(f"singular_value = {field.provenance['value']!r}")
    print(f"converged = {field.provenance['converged']}")
    return EXIT_OK


def _print_quartile_tables(report: dict) -> None:
    """Text rendering of the per-oracle quartile tables."""
    width = 22
    for oracle_name, kinds in report["tables"].items():
        for kind, entry in kinds.items():
            print(f"[{oracle_name} / {kind}]")
            print(f"{'metric':<{width}} {'q1':>12} {'median':>12} {'q3':>12} {'n':>6}")
            for metric, stats in entry.items():
                print(
                    f"{metric:<{width}} {stats['q1']:>12.6g} {stats['q2']:>12.6g} "
                    f"{stats['q3']:>12.6g} {stats['n']:>6d}"
                )


def cmd_report(args) -> int:
    records = harness.read_records(args.records)
    report = harness.build_report(records, None)
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _print_quartile_tables(report)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gaborsense",
        description="Structured-noise universal perturbation toolkit.",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)

    gen = sub.add_parser("gen", help="synthesize one Gabor-noise perturbation")
    gen.add_argument("--sigma", type=float, required=True, help="Gaussian envelope width")
    gen.add_argument("--omega", type=float, required=True, help="orientation in radians")
    gen.add_argument("--lambda", type=float, required=True, help="harmonic frequency")
    gen.add_argument("--size", required=True, help="field size, N or WIDTHxHEIGHT")
    gen.add_argument("--kernel-size", type=int, default=23, help="support radius K")
    gen.add_argument("--density", type=float, default=1.0, help="points per kernel cell")
    gen.add_argument("--epsilon", type=float, default=12.0, help="linf budget")
    gen.add_argument("--mode", choices=("scaled", "sign"), default="scaled",
                     help="field-to-perturbation mapping")
    gen.add_argument("--seed", type=int, default=0, help="scatter seed")
    gen.add_argument("--out", action="append", required=True,
                     help=".gnp or .png path; repeatable")
    gen.set_defaults(func=cmd_gen)

    baseline = sub.add_parser("baseline", help="uniform ±epsilon baseline perturbation")
    baseline.add_argument("--size", required=True, help="field size, N or WIDTHxHEIGHT")
    baseline.add_argument("--epsilon", type=float, default=12.0, help="linf budget")
    baseline.add_argument("--seed", type=int, default=0, help="draw seed")
    baseline.add_argument("--out", action="append", required=True,
                          help=".gnp or .png path; repeatable")
    baseline.set_defaults(func=cmd_baseline)

    ev = sub.add_parser("eval", help="universal metrics for one stored perturbation")
    ev.add_argument("--perturbation", required=True, help=".gnp file to evaluate")
    ev.add_argument("--dataset", required=True, help="PNG directory or raw stack file")
    ev.add_argument("--oracle-cmd", default=os.environ.get("ORACLE_CMD", "builtin"),
                    help="oracle command (default: ORACLE_CMD env or builtin)")
    ev.add_argument("--out", default=None, help="optional JSON output path")
    ev.set_defaults(func=cmd_eval)

    sweep = sub.add_parser("sweep", help="run the full sweep protocol from a config")
    sweep.add_argument("--config", required=True, help="sweep config JSON path")
    sweep.add_argument("--n-perturbations", type=int, default=None)
    sweep.add_argument("--dataset", default=None, help="overrides dataset_path")
    sweep.add_argument("--n-images", type=int, default=None)
    sweep.add_argument("--epsilon", type=float, default=None)
    sweep.add_argument("--kernel-size", type=int, default=None)
    sweep.add_argument("--density", type=float, default=None)
    sweep.add_argument("--master-seed", type=int, default=None)
    sweep.add_argument("--mode", choices=("scaled", "sign"), default=None)
    sweep.add_argument("--out-dir", default=None)
    sweep.add_argument("--jobs", type=int, default=None, help="worker pool size")
    sweep.add_argument("--no-random-baseline", action="store_true",
                       help="skip the random-baseline half")
    sweep.set_defaults(func=cmd_sweep)

    sv = sub.add_parser("svd", help="(p,q)-singular-vector perturbation of the built-in model")
    sv.add_argument("--layer", required=True, help="post_conv, post_pool, or logits")
    sv.add_argument("--p", type=float, default=2.0, help="image-norm exponent")
    sv.add_argument("--q", type=float, default=2.0, help="input-norm exponent")
    sv.add_argument("--epsilon", type=float, default=12.0, help="linf budget")
    sv.add_argument("--batch", type=int, default=16, help="images in the stacked Jacobian")
    sv.add_argument("--dataset", required=True, help="PNG directory or raw stack file")
    sv.add_argument("--model-seed", type=int, default=0, help="built-in model seed")
    sv.add_argument("--seed", type=int, default=0, help="power-method start seed")
    sv.add_argument("--tol", type=float, default=1e-6, help="convergence tolerance")
    sv.add_argument("--max-iter", type=int, default=1000)
    sv.add_argument("--out", action="append", required=True,
                    help=".gnp or .png path; repeatable")
    sv.set_defaults(func=cmd_svd)

    report = sub.add_parser("report", help="aggregate a records CSV into report JSON")
    report.add_argument("--records", required=True, help="records CSV from a sweep")
    report.add_argument("--out", required=True, help="report JSON output path")
    report.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OracleFailure as exc:
        print(f"oracle failure: {exc}", file=sys.stderr)
        return EXIT_ORACLE
    except GaborSenseError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
