"""Command line entry point: ``deepbsde {run,oracle,gradcheck,sweep,list-problems}``.

Exit codes: 0 success, 1 invalid input, 2 numerical failure (divergence,
non-finite values, or a failed gradient check).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import experiment, gradcheck
from .experiment import ConfigError
from .numerics import NumericalError
from .problems import PROBLEMS, make_problem

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _load(args) -> dict:
    return experiment.apply_overrides(experiment.load_config(args.config), args.set)


def cmd_run(args) -> int:
    config = _load(args)
    out = experiment.output_dir(config, args.output_dir)
    for point, cfg in experiment.expand_sweep(config):
        result = experiment.run_experiment(cfg, jobs=args.jobs)
        paths = experiment.write_result(result, out)
        stats = result.summary.stats()
        print(f"{cfg['name']}: u0 {stats['u0_mean']:.6g} +- {stats['u0_std']:.2g}, "
              f"relative error {stats['relative_error_mean']:.3g}, "
              f"runtime {stats['runtime_mean_s']:.1f} s -> {paths[-1]}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    config = _load(args)
    if not config["sweep"]:
        raise ConfigError("sweep needs a non-empty 'sweep' section, e.g. "
                          "{\"problem.params.lambda\": [1, 10, 20]}")
    experiment.sweep_points(config)
    out = experiment.output_dir(config, args.output_dir)
    rows = []
    for point, cfg in experiment.expand_sweep(config):
        result = experiment.run_experiment(cfg, jobs=args.jobs)
        experiment.write_result(result, out / config["name"])
        rows.append((point, result))
        print(f"{experiment.point_label(point)}: u0 {result.summary.stats()['u0_mean']:.6g}")
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{config['name']}_sweep.csv"
    path.write_text(experiment.sweep_csv(rows))
    print(f"wrote {path}")
    return EXIT_OK


def cmd_oracle(args) -> int:
    config = _load(args)
    experiment.validate(config)
    settings = dict(config["oracle"])
    if args.samples is not None:
        settings["samples"] = args.samples
    spec = experiment.build_spec(config)
    value = experiment.compute_oracle(spec, settings)
    if value is None:
        raise ConfigError(f"no oracle or reference available for {spec.problem_id}")
    text = json.dumps(experiment.oracle_json(value), indent=2) + "\n"
    if args.json_out:
        with open(args.json_out, "w") as fh:
            fh.write(text)
    print(text, end="")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.trials < 1:
        raise ConfigError("--trials must be at least 1")
    if not args.dims or not args.steps or min(args.dims + args.steps) < 1:
        raise ConfigError("--dims and --steps need positive integers")
    hook = None
    if args.inject_sign_flip:
        def hook(grads):
            for g in grads.values():
                g *= -1.0
    results = gradcheck.run_suite(args.dims, args.steps, args.trials, args.seed, hook=hook)
    for r in results:
        print(f"{r.problem_id:16s} d={r.dim} N={r.steps} H={r.hidden_layers} B={r.batch_size} "
              f"max_rel_err={r.max_relative_error:.3e} ({r.worst_tensor})")
    worst = max(r.max_relative_error for r in results)
    ok = worst <= gradcheck.TOLERANCE
    print(f"max relative error {worst:.3e} over {len(results)} instances: "
          f"{'PASS' if ok else 'FAIL'} (tolerance {gradcheck.TOLERANCE:g})")
    return EXIT_OK if ok else EXIT_NUMERICAL


def cmd_list_problems(args) -> int:
    for pid in sorted(PROBLEMS):
        spec = make_problem(pid)
        ref = spec.reference
        ref_text = "computed by oracle" if ref is None else f"{ref.value:.6g} ({ref.provenance.value})"
        doc = (PROBLEMS[pid].__doc__ or "").strip().splitlines()
        print(f"{pid:16s} d={spec.dim:<4d} T={spec.horizon:<5g} reference: {ref_text}")
        if doc:
            print(f"    {doc[0]}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="deepbsde", description="Deep BSDE solver experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(p):
        p.add_argument("config", help="config file or bundled config name "
                       f"({', '.join(experiment.bundled_configs())})")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config entry, e.g. train.iterations=500")
        p.add_argument("--output-dir", help=f"overrides ${experiment.OUTPUT_ENV} and output.dir")
        p.add_argument("--jobs", type=int, default=1,
                       help="train seeds in parallel processes (default 1: sequential)")

    p = sub.add_parser("run", help="train every seed of a config (and of each sweep point)")
    with_config(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="cartesian parameter sweep with a combined CSV")
    with_config(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("oracle", help="evaluate the reference value of a config's problem")
    p.add_argument("config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--samples", type=int, help="Monte Carlo sample count")
    p.add_argument("--json-out", help="also write the JSON here")
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("gradcheck", help="finite-difference check of the rollout gradient")
    p.add_argument("--dims", type=_int_list, default=[1, 2, 3])
    p.add_argument("--steps", type=_int_list, default=[1, 2, 3, 4])
    p.add_argument("--trials", type=int, default=24)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--inject-sign-flip", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("list-problems", help="registered problem ids")
    p.set_defaults(func=cmd_list_problems)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # usage errors and --help
        return exc.code
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
