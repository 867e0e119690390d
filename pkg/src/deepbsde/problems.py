"""Semilinear parabolic problems in terminal-value form.

Every problem is written as

    du/dt + 1/2 Tr(sigma sigma^T Hess u) + mu . grad u + f(t, x, u, sigma^T grad u) = 0,
    u(T, x) = g(x),

and the solver only ever sees ``z = sigma^T grad u``.  All callables act on
batches: ``x`` has shape ``(B, d)``, ``y`` shape ``(B,)``, ``z`` shape ``(B, d)``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .numerics import RngStream, as_tensor, standard_normal
from .oracles import gobet_exact, stored_reference
from .references import Provenance, ReferenceValue

SQRT2 = np.sqrt(2.0)

__all__ = [
    "DefaultRiskParams",
    "ProblemSpec",
    "Provenance",
    "ReferenceValue",
    "PROBLEMS",
    "allen_cahn",
    "bs_default_risk",
    "gobet_oscillating",
    "heat",
    "hjb_lqg",
    "intensity_q",
    "intensity_q_derivative",
    "linear_bs_no_default",
    "make_problem",
]


@dataclass(frozen=True, eq=False)
class ProblemSpec:
    problem_id: str
    dim: int
    horizon: float
    start_point: np.ndarray
    drift: Callable
    diffusion_apply: Callable
    diffusion_transpose_apply: Callable
    generator: Callable
    generator_dy: Callable
    generator_dz: Callable
    terminal: Callable
    reference: Optional[ReferenceValue] = None
    u0_bracket: tuple[float, float] = (0.0, 1.0)
    # f = -linear_rate * y with no z-dependence; None for nonlinear generators
    linear_rate: Optional[float] = None
    # exact sampler (rng, n) -> X_T of shape (n, d), when the forward SDE allows one
    exact_terminal: Optional[Callable] = None
    # original-time semantics: the solver's u(0, xi) is u(T, xi) of the unreversed equation
    time_reversed: bool = False
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError(f"dim must be >= 1, got {self.dim}")
        if not self.horizon > 0:
            raise ValueError(f"horizon must be positive, got {self.horizon}")
        for name in ("drift", "diffusion_apply", "diffusion_transpose_apply", "generator",
                     "generator_dy", "generator_dz", "terminal"):
            if not callable(getattr(self, name)):
                raise TypeError(f"{self.problem_id}: {name} must be callable")
        xi = as_tensor(self.start_point, "start_point").reshape(-1)
        if xi.shape != (self.dim,):
            raise ValueError(f"start_point has shape {xi.shape}, expected ({self.dim},)")
        object.__setattr__(self, "start_point", xi)

    def with_reference(self, reference: ReferenceValue) -> "ProblemSpec":
        return dataclasses.replace(self, reference=reference)


@dataclass(frozen=True)
class DefaultRiskParams:
    delta: float = 2.0 / 3.0
    rate: float = 0.02
    mu_bar: float = 0.02
    sigma_bar: float = 0.2
    v_h: float = 50.0
    v_l: float = 70.0
    gamma_h: float = 0.2
    gamma_l: float = 0.02

    def __post_init__(self):
        if not self.v_h < self.v_l:
            raise ValueError(f"need v_h < v_l, got {self.v_h} >= {self.v_l}")
        if not self.gamma_h > self.gamma_l:
            raise ValueError(f"need gamma_h > gamma_l, got {self.gamma_h} <= {self.gamma_l}")
        if not 0.0 <= self.delta < 1.0:
            raise ValueError(f"delta must lie in [0, 1), got {self.delta}")


def intensity_q(y, p: DefaultRiskParams):
    """Piecewise-linear default intensity: gamma_h below v_h, gamma_l from v_l on."""
    y = np.asarray(y, dtype=np.float64)
    slope = (p.gamma_h - p.gamma_l) / (p.v_h - p.v_l)
    mid = slope * (y - p.v_h) + p.gamma_h
    q = np.where(y < p.v_h, p.gamma_h, np.where(y >= p.v_l, p.gamma_l, mid))
    return q[()] if q.ndim == 0 else q


def intensity_q_derivative(y, p: DefaultRiskParams):
    # half-open middle interval [v_h, v_l): kinks take the right-hand branch
    y = np.asarray(y, dtype=np.float64)
    slope = (p.gamma_h - p.gamma_l) / (p.v_h - p.v_l)
    dq = np.where((y >= p.v_h) & (y < p.v_l), slope, 0.0)
    return dq[()] if dq.ndim == 0 else dq


def _zero_drift(t, x):
    return np.zeros_like(x)


def _scaled_identity(scale: float):
    def apply(t, x, v):
        return scale * v
    return apply


def _zeros_dz(t, x, y, z):
    return np.zeros_like(z)


def _batch(x):
    return np.atleast_2d(np.asarray(x, dtype=np.float64))


def _gbm_pieces(d: int, p: DefaultRiskParams, T: float, x0_component: float):
    def drift(t, x):
        return p.mu_bar * x

    def diffusion(t, x, v):
        return p.sigma_bar * x * v

    def terminal(x):
        return np.min(_batch(x), axis=-1)

    def exact_terminal(rng: RngStream, n: int) -> np.ndarray:
        w = standard_normal(rng, (n, d)) * np.sqrt(T)
        log_growth = (p.mu_bar - 0.5 * p.sigma_bar**2) * T + p.sigma_bar * w
        return x0_component * np.exp(log_growth)

    return drift, diffusion, terminal, exact_terminal


def bs_default_risk(d: int = 100, p: DefaultRiskParams | None = None, T: float = 1.0,
                    x0_component: float = 100.0) -> ProblemSpec:
    """Nonlinear Black-Scholes price of a claim whose issuer may default."""
    p = p or DefaultRiskParams()
    drift, diffusion, terminal, exact = _gbm_pieces(d, p, T, x0_component)
    loss_rate = 1.0 - p.delta

    def generator(t, x, y, z):
        return -loss_rate * intensity_q(y, p) * y - p.rate * y

    def generator_dy(t, x, y, z):
        return -loss_rate * (intensity_q_derivative(y, p) * y + intensity_q(y, p)) - p.rate

    reference = None
    if d == 100 and T == 1.0 and x0_component == 100.0 and p == DefaultRiskParams():
        reference = stored_reference("bs_default_risk")
    return ProblemSpec(
        problem_id="bs_default_risk", dim=d, horizon=T, start_point=np.full(d, x0_component),
        drift=drift, diffusion_apply=diffusion, diffusion_transpose_apply=diffusion,
        generator=generator, generator_dy=generator_dy, generator_dz=_zeros_dz,
        terminal=terminal, reference=reference, u0_bracket=(40.0, 70.0),
        exact_terminal=exact,
        params=dict(d=d, T=T, x0_component=x0_component, **dataclasses.asdict(p)),
    )


def linear_bs_no_default(d: int = 100, p: DefaultRiskParams | None = None, T: float = 1.0,
                         x0_component: float = 100.0) -> ProblemSpec:
    """Same market as :func:`bs_default_risk` with the default term dropped."""
    p = p or DefaultRiskParams()
    drift, diffusion, terminal, exact = _gbm_pieces(d, p, T, x0_component)

    def generator(t, x, y, z):
        return -p.rate * np.asarray(y, dtype=np.float64)

    def generator_dy(t, x, y, z):
        return np.full(np.shape(y), -p.rate)

    return ProblemSpec(
        problem_id="bs_linear", dim=d, horizon=T, start_point=np.full(d, x0_component),
        drift=drift, diffusion_apply=diffusion, diffusion_transpose_apply=diffusion,
        generator=generator, generator_dy=generator_dy, generator_dz=_zeros_dz,
        terminal=terminal, u0_bracket=(40.0, 70.0), linear_rate=p.rate,
        exact_terminal=exact,
        params=dict(d=d, T=T, x0_component=x0_component, **dataclasses.asdict(p)),
    )


def hjb_lqg(d: int = 100, lam: float = 1.0, T: float = 1.0) -> ProblemSpec:
    """Value function of the linear-quadratic-Gaussian control problem.

    With ``sigma = sqrt(2) Id`` we have ``|grad u|^2 = |z|^2 / 2``, so the
    Hamiltonian term ``-lam |grad u|^2`` becomes ``-lam |z|^2 / 2``.
    """
    if not lam > 0:
        raise ValueError(f"lambda must be positive, got {lam}")

    def generator(t, x, y, z):
        return -0.5 * lam * np.sum(z * z, axis=-1)

    def generator_dy(t, x, y, z):
        return np.zeros(np.shape(y))

    def generator_dz(t, x, y, z):
        return -lam * z

    def terminal(x):
        x = _batch(x)
        return np.log(0.5 * (1.0 + np.sum(x * x, axis=-1)))

    def exact_terminal(rng: RngStream, n: int) -> np.ndarray:
        return SQRT2 * np.sqrt(T) * standard_normal(rng, (n, d))

    return ProblemSpec(
        problem_id="hjb_lqg", dim=d, horizon=T, start_point=np.zeros(d),
        drift=_zero_drift, diffusion_apply=_scaled_identity(SQRT2),
        diffusion_transpose_apply=_scaled_identity(SQRT2),
        generator=generator, generator_dy=generator_dy, generator_dz=generator_dz,
        terminal=terminal, u0_bracket=(0.0, 5.0), exact_terminal=exact_terminal,
        params=dict(d=d, lam=lam, T=T),
    )


def allen_cahn(d: int = 100, T: float = 0.3) -> ProblemSpec:
    """Allen-Cahn equation ``u_t = Lap u + u - u^3`` with time already reversed.

    The initial datum of the original equation becomes the terminal condition
    at ``T``, so ``u(0, xi)`` reported by the solver is the original ``u(T, xi)``.
    """
    if not T > 0:
        raise ValueError(f"T must be positive, got {T}")

    def generator(t, x, y, z):
        y = np.asarray(y, dtype=np.float64)
        return y - y**3

    def generator_dy(t, x, y, z):
        y = np.asarray(y, dtype=np.float64)
        return 1.0 - 3.0 * y**2

    def terminal(x):
        x = _batch(x)
        return 1.0 / (2.0 + 0.4 * np.sum(x * x, axis=-1))

    reference = stored_reference("allen_cahn") if (d == 100 and T == 0.3) else None
    return ProblemSpec(
        problem_id="allen_cahn", dim=d, horizon=T, start_point=np.zeros(d),
        drift=_zero_drift, diffusion_apply=_scaled_identity(SQRT2),
        diffusion_transpose_apply=_scaled_identity(SQRT2),
        generator=generator, generator_dy=generator_dy, generator_dz=_zeros_dz,
        terminal=terminal, reference=reference, u0_bracket=(0.0, 1.0),
        time_reversed=True, params=dict(d=d, T=T),
    )


def gobet_oscillating(d: int = 100, kappa: float = 1.6, lam: float = 0.1,
                      T: float = 1.0) -> ProblemSpec:
    """Reaction-diffusion problem whose exact solution is a damped sine wave."""

    def u_star(t, x):
        return gobet_exact(t, x, kappa, lam, d, T)

    def generator(t, x, y, z):
        return np.minimum(1.0, (y - u_star(t, x)) ** 2)

    def generator_dy(t, x, y, z):
        s = y - u_star(t, x)
        # derivative 0 on the flat part, including the kink s^2 == 1
        return np.where(s * s < 1.0, 2.0 * s, 0.0)

    def terminal(x):
        return u_star(T, _batch(x))

    xi = np.zeros(d)
    reference = ReferenceValue(
        value=float(u_star(0.0, xi)), provenance=Provenance.EXACT_FUNCTION,
        citation="explicit oscillating solution evaluated at (0, xi)",
    )
    return ProblemSpec(
        problem_id="gobet", dim=d, horizon=T, start_point=xi,
        drift=_zero_drift, diffusion_apply=_scaled_identity(1.0),
        diffusion_transpose_apply=_scaled_identity(1.0),
        generator=generator, generator_dy=generator_dy, generator_dz=_zeros_dz,
        terminal=terminal, reference=reference, u0_bracket=(kappa - 1.0, kappa + 1.0),
        params=dict(d=d, kappa=kappa, lam=lam, T=T),
    )


def heat(d: int = 1, T: float = 1.0, x0_component: float = 0.5, sigma: float = 1.0,
         rate: float = 0.0) -> ProblemSpec:
    """Discounted heat equation with quadratic payoff ``g(x) = |x|^2 / d``.

    Exact value ``exp(-rate T) (x0^2 + sigma^2 T)``.
    """

    def generator(t, x, y, z):
        return -rate * np.asarray(y, dtype=np.float64)

    def generator_dy(t, x, y, z):
        return np.full(np.shape(y), -rate)

    def terminal(x):
        x = _batch(x)
        return np.sum(x * x, axis=-1) / d

    def exact_terminal(rng: RngStream, n: int) -> np.ndarray:
        return x0_component + sigma * np.sqrt(T) * standard_normal(rng, (n, d))

    exact = np.exp(-rate * T) * (x0_component**2 + sigma**2 * T)
    reference = ReferenceValue(value=float(exact), provenance=Provenance.EXACT_FUNCTION,
                               citation="Gaussian second moment, discounted")
    return ProblemSpec(
        problem_id="heat", dim=d, horizon=T, start_point=np.full(d, x0_component),
        drift=_zero_drift, diffusion_apply=_scaled_identity(sigma),
        diffusion_transpose_apply=_scaled_identity(sigma),
        generator=generator, generator_dy=generator_dy, generator_dz=_zeros_dz,
        terminal=terminal, reference=reference, u0_bracket=(0.0, 1.0),
        linear_rate=rate, exact_terminal=exact_terminal,
        params=dict(d=d, T=T, x0_component=x0_component, sigma=sigma, rate=rate),
    )


def _with_risk_params(builder):
    names = {f.name for f in dataclasses.fields(DefaultRiskParams)}

    def build(**kwargs):
        risk = {k: kwargs.pop(k) for k in list(kwargs) if k in names}
        return builder(p=DefaultRiskParams(**risk), **kwargs)

    build.__doc__ = builder.__doc__
    return build


def _with_lambda_alias(builder):
    def build(**kwargs):
        if "lambda" in kwargs:
            kwargs["lam"] = kwargs.pop("lambda")
        return builder(**kwargs)

    build.__doc__ = builder.__doc__
    return build


PROBLEMS: dict[str, Callable[..., ProblemSpec]] = {
    "hjb_lqg": _with_lambda_alias(hjb_lqg),
    "allen_cahn": allen_cahn,
    "bs_default_risk": _with_risk_params(bs_default_risk),
    "bs_linear": _with_risk_params(linear_bs_no_default),
    "gobet": _with_lambda_alias(gobet_oscillating),
    "heat": heat,
}


def make_problem(problem_id: str, **params) -> ProblemSpec:
    try:
        builder = PROBLEMS[problem_id]
    except KeyError:
        known = ", ".join(sorted(PROBLEMS))
        raise KeyError(f"unknown problem_id {problem_id!r}; registered: {known}") from None
    return builder(**params)
