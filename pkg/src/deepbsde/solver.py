"""Deep BSDE solver.

The forward SDE is sampled with an Euler scheme, ``z = sigma^T grad u`` is
approximated at each interior time step by a sub-network, and ``u`` is rolled
forward along each path:

    u_{n+1} = u_n - f(t_n, X_n, u_n, z_n) dt + <z_n, dW_n>.

``u_0`` and ``z_0`` are free parameters (or, in region mode, networks of
``X_0``), and everything is trained to make ``u_N`` match ``g(X_N)``.

Because the paths do not depend on the parameters, all ``N - 1`` sub-networks
are evaluated in one stacked call; only the scalar ``u`` recursion is a loop.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import net
from .net import AdamState, NetConfig, SubNetParams
from .numerics import NumericalError, RngStream, make_rng, standard_normal
from .problems import ProblemSpec

DIVERGENCE_LIMIT = 1e10
# rows used to recompute batch-norm statistics of the region-mode networks
RECALIBRATION_BATCH = 1024


@dataclass(frozen=True)
class TimeGrid:
    steps: int
    horizon: float

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"need at least one time step, got {self.steps}")
        if not self.horizon > 0:
            raise ValueError(f"horizon must be positive, got {self.horizon}")

    @property
    def dt(self) -> float:
        return self.horizon / self.steps

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.steps + 1)


@dataclass
class ModelParams:
    """All trainable state: ``u0``, ``z0`` and the stacked sub-networks.

    ``subnets`` holds the networks for ``t_1 .. t_{N-1}`` stacked along axis 0
    (``None`` when ``N == 1``).  In region mode ``u_net`` and ``z_net`` replace
    the point parameters ``u0`` and ``z0``.
    """

    u0: np.ndarray
    z0: np.ndarray
    subnets: Optional[SubNetParams]
    u_net: Optional[SubNetParams] = None
    z_net: Optional[SubNetParams] = None

    @property
    def region_mode(self) -> bool:
        return self.u_net is not None

    def groups(self) -> dict[str, dict[str, np.ndarray]]:
        out = {}
        if self.region_mode:
            out["u_net"] = self.u_net.tensors
            out["z_net"] = self.z_net.tensors
        else:
            out["point"] = {"u0": self.u0, "z0": self.z0}
        if self.subnets is not None:
            out["subnets"] = self.subnets.tensors
        return out

    def trainable(self) -> dict[str, np.ndarray]:
        """Flat view ``{"group/name": array}``; arrays are shared, not copied."""
        return {f"{g}/{k}": v for g, tensors in self.groups().items() for k, v in tensors.items()}

    def subnet(self, n: int) -> SubNetParams:
        """Sub-network for time step ``t_n``, ``1 <= n <= N - 1``."""
        if self.subnets is None or not 1 <= n <= self.subnets.stack[0]:
            raise IndexError(f"no sub-network for step {n}")
        return self.subnets[n - 1]

    def u0_value(self, xi: Optional[np.ndarray] = None) -> float:
        if not self.region_mode:
            return float(self.u0[0])
        return float(net.forward_eval(self.u_net, np.atleast_2d(xi))[0, 0])

    def copy(self) -> "ModelParams":
        return ModelParams(self.u0.copy(), self.z0.copy(),
                           None if self.subnets is None else self.subnets.copy(),
                           None if self.u_net is None else self.u_net.copy(),
                           None if self.z_net is None else self.z_net.copy())


def init_params(spec: ProblemSpec, grid: TimeGrid, net_cfg: NetConfig, rng: RngStream,
                u0_bracket: Optional[Sequence[float]] = None,
                region_mode: bool = False) -> ModelParams:
    lo, hi = u0_bracket if u0_bracket is not None else spec.u0_bracket
    u0 = rng.uniform((1,), lo, hi)
    z0 = rng.uniform((spec.dim,), -0.1, 0.1)
    subnets = None
    if grid.steps > 1:
        subnets = net.init_subnet(net_cfg, rng, stack=grid.steps - 1)
    u_net = z_net = None
    if region_mode:
        u_cfg = NetConfig(**{**net_cfg.to_dict(), "output_dim": 1, "output_scale": 1.0})
        u_net = net.init_subnet(u_cfg, rng)
        z_net = net.init_subnet(net_cfg, rng)
        # start the value network inside the bracket
        u_net.tensors[f"beta{net_cfg.hidden_layers}"][:] = u0
    return ModelParams(u0, z0, subnets, u_net, z_net)


def sample_paths(spec: ProblemSpec, grid: TimeGrid, batch_size: int, rng: RngStream,
                 x0: Optional[np.ndarray] = None):
    """Euler paths ``X`` of shape ``(B, N+1, d)`` and increments ``dW`` of shape ``(B, N, d)``."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    B, N, d = batch_size, grid.steps, spec.dim
    dt = grid.dt
    dW = math.sqrt(dt) * standard_normal(rng, (B, N, d))
    X = np.empty((B, N + 1, d))
    X[:, 0] = spec.start_point if x0 is None else x0
    for n in range(N):
        x = X[:, n]
        t = n * dt
        X[:, n + 1] = x + spec.drift(t, x) * dt + spec.diffusion_apply(t, x, dW[:, n])
        if not np.all(np.isfinite(X[:, n + 1])):
            b = int(np.argmin(np.all(np.isfinite(X[:, n + 1]), axis=-1)))
            raise NumericalError(f"non-finite path value at step {n + 1}, batch index {b}")
    return X, dW


@dataclass
class Rollout:
    u_hat: np.ndarray  # (B,)
    loss: float
    u: np.ndarray  # (B, N+1)
    z: np.ndarray  # (B, N, d)
    terminal: np.ndarray  # g(X_N), (B,)
    subnet_cache: Optional[net.ForwardCache] = None
    u_net_cache: Optional[net.ForwardCache] = None
    z_net_cache: Optional[net.ForwardCache] = None


def rollout(spec: ProblemSpec, grid: TimeGrid, params: ModelParams, X: np.ndarray,
            dW: np.ndarray, training: bool = True, update_stats: bool = True) -> Rollout:
    """Roll ``u`` forward along the sampled paths and evaluate the terminal loss."""
    B, N, d = dW.shape
    if X.shape != (B, N + 1, d) or N != grid.steps or d != spec.dim:
        raise ValueError(f"inconsistent shapes X={X.shape}, dW={dW.shape}, "
                         f"steps={grid.steps}, dim={spec.dim}")
    dt = grid.dt
    z = np.empty((B, N, d))
    out = Rollout(u_hat=None, loss=math.nan, u=np.empty((B, N + 1)), z=z, terminal=None)

    if params.region_mode:
        x0 = X[:, 0]
        if training:
            u0, out.u_net_cache = net.forward_train(params.u_net, x0, update_stats)
            z[:, 0], out.z_net_cache = net.forward_train(params.z_net, x0, update_stats)
        else:
            u0 = net.forward_eval(params.u_net, x0)
            z[:, 0] = net.forward_eval(params.z_net, x0)
        out.u[:, 0] = u0[:, 0]
    else:
        out.u[:, 0] = params.u0[0]
        z[:, 0] = params.z0

    if N > 1:
        # (N-1, B, d): one stacked evaluation for all interior steps
        x_inner = np.ascontiguousarray(X[:, 1:N].transpose(1, 0, 2))
        if training:
            z_inner, out.subnet_cache = net.forward_train(params.subnets, x_inner, update_stats)
        else:
            z_inner = net.forward_eval(params.subnets, x_inner)
        z[:, 1:] = z_inner.transpose(1, 0, 2)

    u = out.u
    for n in range(N):
        t = n * dt
        f = spec.generator(t, X[:, n], u[:, n], z[:, n])
        u[:, n + 1] = u[:, n] - f * dt + np.einsum("bd,bd->b", z[:, n], dW[:, n])
        if not np.all(np.isfinite(u[:, n + 1])):
            raise NumericalError(f"non-finite u at step {n + 1}")
    out.u_hat = u[:, N]
    out.terminal = spec.terminal(X[:, N])
    resid = out.terminal - out.u_hat
    out.loss = float(np.mean(resid * resid))
    return out


def backward_rollout(spec: ProblemSpec, grid: TimeGrid, params: ModelParams,
                     X: np.ndarray, dW: np.ndarray, ro: Rollout) -> dict[str, np.ndarray]:
    """Exact gradient of ``ro.loss`` for every tensor in ``params.trainable()``."""
    B, N, d = dW.shape
    dt = grid.dt
    u, z = ro.u, ro.z
    # adjoint of u_n, walked backwards through the recursion
    u_bar = -2.0 * (ro.terminal - ro.u_hat) / B
    z_bar = np.empty((B, N, d))
    for n in range(N - 1, -1, -1):
        t = n * dt
        fy = spec.generator_dy(t, X[:, n], u[:, n], z[:, n])
        fz = spec.generator_dz(t, X[:, n], u[:, n], z[:, n])
        z_bar[:, n] = u_bar[:, None] * (dW[:, n] - fz * dt)
        u_bar = u_bar * (1.0 - fy * dt)

    grads: dict[str, np.ndarray] = {}
    if params.region_mode:
        g_u, _ = net.backward(params.u_net, ro.u_net_cache, u_bar[:, None])
        g_z, _ = net.backward(params.z_net, ro.z_net_cache, z_bar[:, 0])
        grads.update({f"u_net/{k}": v for k, v in g_u.items()})
        grads.update({f"z_net/{k}": v for k, v in g_z.items()})
    else:
        grads["point/u0"] = np.array([u_bar.sum()])
        grads["point/z0"] = z_bar[:, 0].sum(axis=0)
    if N > 1:
        if ro.subnet_cache is None:
            raise ValueError("backward_rollout needs a training-mode rollout")
        g_inner = np.ascontiguousarray(z_bar[:, 1:].transpose(1, 0, 2))
        g_sub, _ = net.backward(params.subnets, ro.subnet_cache, g_inner)
        grads.update({f"subnets/{k}": v for k, v in g_sub.items()})
    return grads


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    iterations: int = 2000
    lr_schedule: tuple = ((0, 0.01),)
    seed: int = 0
    eval_every: int = 100
    runs: int = 5
    u0_bracket: Optional[tuple] = None
    record_time: bool = True

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.iterations < 1 or self.eval_every < 1 or self.runs < 1:
            raise ValueError("iterations, eval_every and runs must be positive")
        schedule = tuple((int(s), float(r)) for s, r in self.lr_schedule)
        if not schedule or schedule[0][0] != 0:
            raise ValueError("lr_schedule must start at iteration 0")
        if any(b[0] <= a[0] for a, b in zip(schedule, schedule[1:])):
            raise ValueError("lr_schedule start iterations must be strictly increasing")
        object.__setattr__(self, "lr_schedule", schedule)

    def lr_at(self, iteration: int) -> float:
        rate = self.lr_schedule[0][1]
        for start, r in self.lr_schedule:
            if iteration >= start:
                rate = r
        return rate


@dataclass
class Record:
    iteration: int
    loss: float
    u0: float
    relative_error: float
    elapsed_s: float


@dataclass
class RunSummary:
    runs: list[list[Record]] = field(default_factory=list)
    seeds: list[int] = field(default_factory=list)
    reference: Optional[float] = None

    @property
    def final_u0(self) -> np.ndarray:
        return np.array([r[-1].u0 for r in self.runs])

    @property
    def final_relative_error(self) -> np.ndarray:
        return np.array([r[-1].relative_error for r in self.runs])

    @property
    def runtimes(self) -> np.ndarray:
        return np.array([r[-1].elapsed_s for r in self.runs])

    def stats(self) -> dict:
        u0 = self.final_u0
        rel = self.final_relative_error
        return {
            "u0_mean": float(u0.mean()),
            "u0_std": float(u0.std()),
            "relative_error_mean": float(rel.mean()),
            "relative_error_std": float(rel.std()),
            "runtime_mean_s": float(self.runtimes.mean()),
            "runs": len(self.runs),
        }

    def curve(self) -> dict[str, np.ndarray]:
        """Mean and std across runs at each logged iteration."""
        its = np.array([r.iteration for r in self.runs[0]])
        u0 = np.array([[r.u0 for r in run] for run in self.runs])
        rel = np.array([[r.relative_error for r in run] for run in self.runs])
        return {"iteration": its, "u0_mean": u0.mean(0), "u0_std": u0.std(0),
                "relative_error_mean": rel.mean(0), "relative_error_std": rel.std(0)}


def _relative_error(reference: Optional[float], value: float) -> float:
    if reference is None:
        return math.nan
    return abs(value - reference) / abs(reference)


def train_run(spec: ProblemSpec, grid: TimeGrid, net_cfg: NetConfig, train_cfg: TrainConfig,
              seed: int, x0_sampler: Optional[Callable] = None,
              callback: Optional[Callable[[Record], None]] = None):
    """One optimisation run; returns ``(params, records)``.

    ``x0_sampler(rng, B) -> (B, d)`` switches on region mode.
    """
    init_rng = make_rng(seed, 0)
    path_rng = make_rng(seed, 1)
    calib_rng = make_rng(seed, 2)
    region = x0_sampler is not None
    params = init_params(spec, grid, net_cfg, init_rng, train_cfg.u0_bracket, region_mode=region)
    tensors = params.trainable()
    adam = AdamState.zeros_like(tensors)
    reference = spec.reference.value if spec.reference is not None else None
    records: list[Record] = []
    start = time.perf_counter()
    B = train_cfg.batch_size
    for it in range(train_cfg.iterations + 1):
        x0 = x0_sampler(path_rng, B) if region else None
        X, dW = sample_paths(spec, grid, B, path_rng, x0)
        ro = rollout(spec, grid, params, X, dW, training=True)
        if not math.isfinite(ro.loss) or ro.loss > DIVERGENCE_LIMIT:
            raise NumericalError(f"run with seed {seed} diverged at iteration {it}: "
                                 f"loss={ro.loss:.3e}, u0={params.u0_value(spec.start_point):.6g}")
        if it % train_cfg.eval_every == 0 or it == train_cfg.iterations:
            if region:
                _recalibrate_region(params, x0_sampler(calib_rng, RECALIBRATION_BATCH))
            u0 = params.u0_value(spec.start_point)
            elapsed = time.perf_counter() - start if train_cfg.record_time else 0.0
            rec = Record(it, ro.loss, u0, _relative_error(reference, u0), elapsed)
            records.append(rec)
            if callback is not None:
                callback(rec)
        if it == train_cfg.iterations:
            break
        grads = backward_rollout(spec, grid, params, X, dW, ro)
        net.adam_step(tensors, grads, adam, train_cfg.lr_at(it))
    return params, records


def _recalibrate_region(params: ModelParams, x0: np.ndarray) -> None:
    # Running averages lag the weights, and for a concentrated X_0 law the
    # eval-mode normalisation divides by ~sqrt(eps), so the lag is amplified.
    # Recomputing the statistics makes u_net(xi) a faithful read-out.
    net.recalibrate(params.u_net, x0)
    net.recalibrate(params.z_net, x0)


def train(spec: ProblemSpec, grid: TimeGrid, net_cfg: NetConfig, train_cfg: TrainConfig,
          callback: Optional[Callable[[int, Record], None]] = None):
    """Independent runs with seeds ``seed, seed+1, ...``; returns ``(params_per_run, summary)``."""
    summary = RunSummary(reference=spec.reference.value if spec.reference is not None else None)
    all_params = []
    for r in range(train_cfg.runs):
        seed = train_cfg.seed + r
        cb = None if callback is None else (lambda rec, r=r: callback(r, rec))
        params, records = train_run(spec, grid, net_cfg, train_cfg, seed, callback=cb)
        all_params.append(params)
        summary.runs.append(records)
        summary.seeds.append(seed)
    return all_params, summary


def train_region_mode(spec: ProblemSpec, x0_sampler: Callable, grid: TimeGrid,
                      net_cfg: NetConfig, train_cfg: TrainConfig):
    """Like :func:`train`, but ``X_0`` is drawn by ``x0_sampler(rng, B)`` and
    ``u(0, .)``, ``z(0, .)`` are networks.  Reported ``u0`` is the value network
    evaluated at ``spec.start_point``."""
    summary = RunSummary(reference=spec.reference.value if spec.reference is not None else None)
    all_params = []
    for r in range(train_cfg.runs):
        seed = train_cfg.seed + r
        params, records = train_run(spec, grid, net_cfg, train_cfg, seed, x0_sampler=x0_sampler)
        all_params.append(params)
        summary.runs.append(records)
        summary.seeds.append(seed)
    return all_params, summary


def default_net_config(spec: ProblemSpec, **overrides) -> NetConfig:
    """``d -> (d+10) -> (d+10) -> d`` with outputs scaled by ``1/d``.

    Batch-normalised outputs start with unit variance per component, so
    ``|z|^2`` would start at ``d``; the fixed ``1/d`` factor starts it near the
    magnitudes the benchmark problems actually have.
    """
    kwargs = dict(input_dim=spec.dim, output_dim=spec.dim, output_scale=1.0 / spec.dim)
    kwargs.update(overrides)
    return NetConfig(**kwargs)


def save_params(path, params: ModelParams, meta: Optional[dict] = None) -> None:
    tensors = dict(params.trainable())
    for name, sub in (("subnets", params.subnets), ("u_net", params.u_net), ("z_net", params.z_net)):
        if sub is not None:
            tensors.update({f"{name}/moving/{k}": v for k, v in sub.moving.items()})
    configs = {name: {"config": sub.config.to_dict(), "stack": list(sub.stack)}
               for name, sub in (("subnets", params.subnets), ("u_net", params.u_net),
                                 ("z_net", params.z_net)) if sub is not None}
    net.save_tensors(path, tensors, {"nets": configs, "region_mode": params.region_mode,
                                     **(meta or {})})


def load_params(path) -> ModelParams:
    tensors, meta = net.load_tensors(path)
    nets = {}
    for name, info in meta["nets"].items():
        prefix = f"{name}/"
        moving_prefix = f"{name}/moving/"
        moving = {k[len(moving_prefix):]: v for k, v in tensors.items() if k.startswith(moving_prefix)}
        trainable = {k[len(prefix):]: v for k, v in tensors.items()
                     if k.startswith(prefix) and not k.startswith(moving_prefix)}
        nets[name] = SubNetParams(NetConfig(**info["config"]), tuple(info["stack"]), trainable, moving)
    if meta["region_mode"]:
        u0 = np.zeros(1)
        z0 = np.zeros(nets["z_net"].config.output_dim)
    else:
        u0, z0 = tensors["point/u0"], tensors["point/z0"]
    return ModelParams(u0, z0, nets.get("subnets"), nets.get("u_net"), nets.get("z_net"))
