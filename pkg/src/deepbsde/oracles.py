"""Independent reference values: Monte Carlo oracles, the exact oscillating
solution, and published constants for problems with no closed form."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .numerics import RngStream, standard_normal
from .references import Provenance, ReferenceValue

DEFAULT_CHUNK = 20_000

_STORED = {
    "bs_default_risk": ReferenceValue(
        value=57.300,
        provenance=Provenance.EXTERNAL_PUBLISHED,
        citation="multilevel Picard approximation of u(0, (100, ..., 100)), d=100, T=1",
    ),
    "allen_cahn": ReferenceValue(
        value=0.0528,
        provenance=Provenance.EXTERNAL_PUBLISHED,
        citation="branching diffusion approximation of u(0.3, (0, ..., 0)), d=100",
    ),
}


@dataclass(frozen=True)
class McEstimate:
    value: float
    std_error: float
    samples: int
    seed: Optional[int] = None

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def as_reference(self, citation: str = "") -> ReferenceValue:
        return ReferenceValue(self.value, Provenance.CLOSED_FORM_MC, citation, self.std_error)


def stored_reference(problem_id: str) -> ReferenceValue:
    try:
        return _STORED[problem_id]
    except KeyError:
        raise KeyError(
            f"no stored reference for {problem_id!r}; stored ids: {sorted(_STORED)} "
            "(hjb_lqg and bs_linear are computed by their Monte Carlo oracles)"
        ) from None


def gobet_exact(t, x, kappa: float, lam: float, d: int, T: float):
    """``kappa + sin(lam * sum(x)) * exp(lam^2 d (t - T) / 2)``, summing the last axis."""
    s = np.sum(np.asarray(x, dtype=np.float64), axis=-1)
    return kappa + np.sin(lam * s) * np.exp(0.5 * lam**2 * d * (t - T))


def _chunks(samples: int, chunk: int):
    done = 0
    while done < samples:
        n = min(chunk, samples - done)
        yield n
        done += n


class _LogMeanExp:
    """Streaming mean of ``exp(a)`` kept in shifted form to avoid overflow."""

    def __init__(self):
        self.shift = -math.inf
        self.s1 = 0.0
        self.s2 = 0.0
        self.n = 0

    def add(self, a: np.ndarray) -> None:
        m = float(np.max(a))
        if m > self.shift:
            scale = math.exp(self.shift - m) if self.n else 0.0
            self.s1 *= scale
            self.s2 *= scale * scale
            self.shift = m
        w = np.exp(a - self.shift)
        self.s1 += float(np.sum(w))
        self.s2 += float(np.sum(w * w))
        self.n += a.size

    def log_mean(self) -> float:
        return self.shift + math.log(self.s1 / self.n)

    def relative_std_error(self) -> float:
        """Standard error of the mean of ``exp(a)`` divided by that mean."""
        mean = self.s1 / self.n
        var = max(self.s2 - self.s1 * mean, 0.0) / max(self.n - 1, 1)
        return math.sqrt(var / self.n) / mean


def hjb_reference_sweep(d: int, lams: Sequence[float], T: float, g: Callable, x,
                        samples: int, rng: RngStream, chunk: int = DEFAULT_CHUNK,
                        symmetric_g: bool = False) -> list[McEstimate]:
    """Monte Carlo value of ``-1/lam * log E[exp(-lam g(x + sqrt(2) W_T))]`` for each lam.

    All lambdas share the same terminal samples.  Standard errors come from the
    delta method applied to the logarithm.  With ``symmetric_g`` (g invariant
    under coordinate permutations) ``x`` is sorted first; the Brownian
    increment is exchangeable, so the value is unchanged and permuted inputs
    give bit-identical results for a given stream.
    """
    lams = [float(v) for v in lams]
    if any(not v > 0 for v in lams):
        raise ValueError(f"lambda must be positive, got {lams}")
    if samples < 1000:
        raise ValueError(f"need at least 1000 samples, got {samples}")
    x = np.broadcast_to(np.asarray(x, dtype=np.float64), (d,))
    if symmetric_g:
        x = np.sort(x)
    acc = [_LogMeanExp() for _ in lams]
    scale = math.sqrt(2.0 * T)
    for n in _chunks(samples, chunk):
        gx = g(x + scale * standard_normal(rng, (n, d)))
        for lam, a in zip(lams, acc):
            a.add(-lam * gx)
    return [
        McEstimate(value=-a.log_mean() / lam, std_error=a.relative_std_error() / lam,
                   samples=samples, seed=rng.seed)
        for lam, a in zip(lams, acc)
    ]


def hjb_reference(d: int, lam: float, T: float, g: Callable, x, samples: int,
                  rng: RngStream, chunk: int = DEFAULT_CHUNK,
                  symmetric_g: bool = False) -> McEstimate:
    return hjb_reference_sweep(d, [lam], T, g, x, samples, rng, chunk, symmetric_g)[0]


def _euler_terminal(spec, rng: RngStream, n: int, steps: int) -> np.ndarray:
    dt = spec.horizon / steps
    x = np.broadcast_to(spec.start_point, (n, spec.dim)).copy()
    for k in range(steps):
        dw = math.sqrt(dt) * standard_normal(rng, (n, spec.dim))
        t = k * dt
        x = x + spec.drift(t, x) * dt + spec.diffusion_apply(t, x, dw)
    return x


def linear_fk_reference(spec, samples: int, rng: RngStream, steps: int = 100,
                        chunk: int = DEFAULT_CHUNK) -> McEstimate:
    """``exp(-R T) E[g(X_T)]`` for a generator of the form ``f = -R y``.

    Uses the problem's exact terminal sampler when it has one, else an Euler
    scheme with ``steps`` steps.
    """
    if spec.linear_rate is None:
        raise ValueError(f"{spec.problem_id}: generator is not linear in y; "
                         "the Feynman-Kac oracle does not apply")
    total = 0.0
    total_sq = 0.0
    for n in _chunks(samples, chunk):
        if spec.exact_terminal is not None:
            xt = spec.exact_terminal(rng, n)
        else:
            xt = _euler_terminal(spec, rng, n, steps)
        gx = spec.terminal(xt)
        total += float(np.sum(gx))
        total_sq += float(np.sum(gx * gx))
    mean = total / samples
    var = max(total_sq - total * mean, 0.0) / max(samples - 1, 1)
    discount = math.exp(-spec.linear_rate * spec.horizon)
    return McEstimate(value=discount * mean, std_error=discount * math.sqrt(var / samples),
                      samples=samples, seed=rng.seed)
