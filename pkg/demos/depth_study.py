"""How sub-network depth affects accuracy on an equation with a known solution.

The oscillating reaction-diffusion problem has an explicit solution, so the
relative error of u(0, x0) is exact.  Residual sub-networks with 0, 1, 2 hidden
layers are trained on a reduced (d = 20) version by default.  The solution
depends on x through lam * sum(x), whose variance grows like lam^2 d, so lam is
scaled to keep lam^2 d = 1 and the reduced problem as hard as the d = 100 one.

    python demos/depth_study.py [--d 20] [--iterations 8000] [--depths 0 1 2]
"""

import argparse

from deepbsde import problems, solver

parser = argparse.ArgumentParser()
parser.add_argument("--d", type=int, default=20)
parser.add_argument("--iterations", type=int, default=8000)
parser.add_argument("--runs", type=int, default=1)
parser.add_argument("--depths", type=int, nargs="+", default=[0, 1, 2])
args = parser.parse_args()

spec = problems.gobet_oscillating(d=args.d, lam=0.1 * (100 / args.d) ** 0.5)
grid = solver.TimeGrid(30, spec.horizon)
half = args.iterations // 2
train_cfg = solver.TrainConfig(iterations=args.iterations, lr_schedule=((0, 0.01), (half, 0.001)),
                               runs=args.runs, eval_every=args.iterations)
print(f"exact u(0, x0) = {spec.reference.value}")
for H in args.depths:
    net_cfg = solver.default_net_config(spec, hidden_layers=H, style="residual", hidden_width=args.d)
    _, summary = solver.train(spec, grid, net_cfg, train_cfg)
    stats = summary.stats()
    print(f"H={H}  trainable layers {(H + 1) * (grid.steps - 1):4d}  "
          f"relative error {stats['relative_error_mean']:.2%} (std {stats['relative_error_std']:.2%})")
