"""Central finite-difference checks of the rollout gradient."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import solver
from .net import NetConfig
from .numerics import make_rng, standard_normal
from .problems import ProblemSpec, make_problem

FD_STEP = 1e-6
TOLERANCE = 1e-5
# instances whose BN batch variance falls below this are redrawn: there the
# loss curvature is ~1/eps and central differences at FD_STEP stop being an oracle
MIN_BN_VARIANCE = 1e-4
# entries smaller than this fraction of the largest gradient entry are compared
# on that scale instead of their own; FD round-off is ~1e-16 * loss / step
RELATIVE_FLOOR = 1e-3

BENCHMARK_PROBLEMS = ("hjb_lqg", "allen_cahn", "bs_default_risk", "gobet")


def relative_error(analytic: np.ndarray, numeric: np.ndarray, scale: float) -> float:
    floor = RELATIVE_FLOOR * max(scale, 1e-12)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


@dataclass
class GradcheckResult:
    problem_id: str
    dim: int
    steps: int
    hidden_layers: int
    batch_size: int
    max_relative_error: float
    worst_tensor: str
    entries: int

    @property
    def passed(self) -> bool:
        return self.max_relative_error <= TOLERANCE


def finite_difference_gradients(spec: ProblemSpec, grid: solver.TimeGrid,
                                params: solver.ModelParams, X, dW,
                                step: float = FD_STEP) -> dict[str, np.ndarray]:
    def loss() -> float:
        return solver.rollout(spec, grid, params, X, dW, training=True, update_stats=False).loss

    out = {}
    for name, tensor in params.trainable().items():
        g = np.zeros_like(tensor)
        flat, gflat = tensor.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = loss()
            flat[i] = orig - step
            down = loss()
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * step)
        out[name] = g
    return out


def _min_bn_variance(ro: solver.Rollout) -> float:
    caches = [c for c in (ro.subnet_cache, ro.u_net_cache, ro.z_net_cache) if c is not None]
    variances = [bn.var.min() for c in caches for bn in c.bns]
    variances += [c.input_bn.var.min() for c in caches if c.input_bn is not None]
    return float(min(variances, default=np.inf))


def random_instance(problem_id: str, dim: int, steps: int, hidden_layers: int,
                    batch_size: int, seed: int, style: str = "plain"):
    """A small problem with randomised (not freshly initialised) parameters.

    Draws are repeated until every batch-norm variance is at least
    ``MIN_BN_VARIANCE`` so the finite-difference oracle stays valid.
    """
    for attempt in range(100):
        inst = _draw_instance(problem_id, dim, steps, hidden_layers, batch_size,
                              seed, attempt, style)
        ro = solver.rollout(*inst, training=True, update_stats=False)
        if _min_bn_variance(ro) >= MIN_BN_VARIANCE:
            return inst
    raise RuntimeError("could not draw a well-conditioned instance")


def _draw_instance(problem_id, dim, steps, hidden_layers, batch_size, seed, attempt, style):
    rng = make_rng(seed, 7 + (attempt << 32))
    kwargs = {"d": dim}
    if problem_id == "allen_cahn":
        kwargs["T"] = 0.3
    elif problem_id in ("bs_default_risk", "bs_linear"):
        # the pricing problem is positively homogeneous: scaling x0 and the Q
        # thresholds by 1/100 scales u by 1/100.  At O(1) magnitudes FD round-off
        # (~1e-16 * |u|^2 / step) stays well below tolerance, and y still crosses
        # the interpolation branch of Q.
        kwargs.update(x0_component=0.6, v_h=0.5, v_l=0.7)
    spec = make_problem(problem_id, **kwargs)
    grid = solver.TimeGrid(steps, spec.horizon)
    width = dim if style == "residual" else dim + 10
    cfg = NetConfig(input_dim=dim, output_dim=dim, hidden_layers=hidden_layers,
                    hidden_width=width, style=style)
    bracket = None
    if problem_id in ("bs_default_risk", "bs_linear"):
        bracket = (0.4, 0.7)
    params = solver.init_params(spec, grid, cfg, rng, u0_bracket=bracket)
    for name, tensor in params.trainable().items():
        if name.startswith("subnets/"):
            tensor += 0.3 * standard_normal(rng, tensor.shape)
    params.z0[:] = standard_normal(rng, params.z0.shape) * 0.5
    X, dW = solver.sample_paths(spec, grid, batch_size, rng)
    return spec, grid, params, X, dW


def check_instance(problem_id: str, dim: int, steps: int, hidden_layers: int,
                   batch_size: int, seed: int, style: str = "plain",
                   hook: Optional[Callable[[dict], None]] = None) -> GradcheckResult:
    """Compare :func:`solver.backward_rollout` with central differences.

    ``hook`` may mutate the analytic gradients before comparison; it exists so
    the harness can prove it catches a corrupted gradient.
    """
    spec, grid, params, X, dW = random_instance(problem_id, dim, steps, hidden_layers,
                                                batch_size, seed, style)
    ro = solver.rollout(spec, grid, params, X, dW, training=True, update_stats=False)
    analytic = solver.backward_rollout(spec, grid, params, X, dW, ro)
    if hook is not None:
        hook(analytic)
    numeric = finite_difference_gradients(spec, grid, params, X, dW)
    scale = max(float(np.max(np.abs(v))) for v in numeric.values())
    worst, worst_name, entries = 0.0, "", 0
    for name in numeric:
        err = relative_error(analytic[name], numeric[name], scale)
        entries += numeric[name].size
        if err > worst:
            worst, worst_name = err, name
    return GradcheckResult(problem_id, dim, steps, hidden_layers, batch_size,
                           worst, worst_name, entries)


def run_suite(dims=(1, 2, 3), steps=(1, 2, 3, 4), trials: int = 24, seed: int = 0,
              problems=BENCHMARK_PROBLEMS, hook=None) -> list[GradcheckResult]:
    """Randomised instances cycling through ``problems``, ``H in {0, 1, 2}``, ``B in {2, 4}``."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    pick = make_rng(seed, 11)
    results = []
    for k in range(trials):
        u = pick.uniform((5,))
        problem_id = problems[k % len(problems)]
        dim = dims[int(u[0] * len(dims))]
        n = steps[int(u[1] * len(steps))]
        hidden = int(u[2] * 3)
        batch = (2, 4)[int(u[3] * 2)]
        style = "residual" if u[4] < 0.3 else "plain"
        results.append(check_instance(problem_id, dim, n, hidden, batch, seed * 1000 + k,
                                      style, hook))
    return results
