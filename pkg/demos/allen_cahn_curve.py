"""Time evolution of u(t, 0) for the 100-dimensional Allen-Cahn equation.

The equation is solved once per horizon T; the solver's u(0, 0) for horizon T
is the original equation's u(T, 0).  At T = 0.3 a published branching
diffusion value is available for comparison.

    python demos/allen_cahn_curve.py [--iterations 8000] [--runs 1]
"""

import argparse

from deepbsde import problems, solver

parser = argparse.ArgumentParser()
parser.add_argument("--iterations", type=int, default=8000)
parser.add_argument("--runs", type=int, default=1)
parser.add_argument("--horizons", type=float, nargs="+", default=[0.05, 0.1, 0.15, 0.2, 0.25, 0.3])
args = parser.parse_args()

print(f"{'t':>5} {'u(t, 0)':>9} {'std':>8} {'reference':>9}")
for T in args.horizons:
    spec = problems.allen_cahn(d=100, T=T)
    grid = solver.TimeGrid(20, T)
    train_cfg = solver.TrainConfig(iterations=args.iterations, lr_schedule=((0, 5e-4),),
                                   runs=args.runs, eval_every=args.iterations)
    _, summary = solver.train(spec, grid, solver.default_net_config(spec), train_cfg)
    stats = summary.stats()
    ref = "" if spec.reference is None else f"{spec.reference.value:9.4f}"
    print(f"{T:5.2f} {stats['u0_mean']:9.5f} {stats['u0_std']:8.2g} {ref:>9}")
