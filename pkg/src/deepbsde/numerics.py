"""Random streams and small array helpers shared by every other module.

Randomness comes from Philox4x64-10 (Salmon et al., "Parallel random numbers:
as easy as 1, 2, 3"), a counter-based generator with a 256-bit counter and a
128-bit key.  The key is ``(seed, stream_id)``, so every sub-stream is a
distinct keyed permutation of the same counter sequence and no state has to be
jumped or split.  Normal variates use the Box-Muller transform with both
outputs kept.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

ALGORITHM_ID = "philox4x64-10"

_UINT64_MASK = (1 << 64) - 1
_TWO_POW_M53 = 2.0**-53


class NumericalError(ArithmeticError):
    """A non-finite or divergent value appeared during a computation."""


class RngStream:
    """A seeded, reproducible stream of 64-bit words.

    Not thread-safe; derive one stream per worker up front with
    :meth:`child` instead of sharing.
    """

    algorithm_id = ALGORITHM_ID

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed) & _UINT64_MASK
        self.stream_id = int(stream_id) & _UINT64_MASK
        key = np.array([self.seed, self.stream_id], dtype=np.uint64)
        self._bitgen = np.random.Philox(key=key)

    def __repr__(self) -> str:
        return f"RngStream({ALGORITHM_ID}, seed={self.seed}, stream_id={self.stream_id})"

    @property
    def state(self) -> dict:
        return self._bitgen.state

    def clone(self) -> "RngStream":
        other = RngStream(self.seed, self.stream_id)
        other._bitgen.state = self._bitgen.state
        return other

    def child(self, stream_id: int) -> "RngStream":
        """Fresh stream under the same seed with a different label."""
        return RngStream(self.seed, stream_id)

    def raw(self, n: int) -> np.ndarray:
        return self._bitgen.random_raw(int(n))

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        """Uniform draws on ``[low, high)`` using the top 53 bits of each word."""
        shape = _check_shape(shape)
        n = int(np.prod(shape))
        u = (self.raw(n) >> np.uint64(11)).astype(np.float64) * _TWO_POW_M53
        return (low + (high - low) * u).reshape(shape)


def make_rng(seed: int, stream_id: int = 0) -> RngStream:
    return RngStream(seed, stream_id)


def _check_shape(shape) -> tuple[int, ...]:
    if isinstance(shape, (int, np.integer)):
        shape = (int(shape),)
    shape = tuple(int(s) for s in shape)
    if len(shape) == 0 or any(s <= 0 for s in shape):
        raise ValueError(f"shape must be non-empty with positive extents, got {shape}")
    return shape


def standard_normal(rng: RngStream, shape) -> np.ndarray:
    """I.i.d. N(0, 1) draws via Box-Muller, consuming one word per variate."""
    shape = _check_shape(shape)
    n = int(np.prod(shape))
    pairs = (n + 1) // 2
    words = rng.raw(2 * pairs) >> np.uint64(11)
    # u1 in (0, 1] keeps the log finite; u2 in [0, 1)
    u1 = (words[0::2].astype(np.float64) + 1.0) * _TWO_POW_M53
    u2 = words[1::2].astype(np.float64) * _TWO_POW_M53
    radius = np.sqrt(-2.0 * np.log(u1))
    angle = 2.0 * np.pi * u2
    out = np.empty(2 * pairs)
    out[0::2] = radius * np.cos(angle)
    out[1::2] = radius * np.sin(angle)
    return out[:n].reshape(shape)


def as_tensor(data, name: str = "input") -> np.ndarray:
    """Copy ``data`` into a float64 array, rejecting NaN and Inf."""
    arr = np.array(data, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def write_golden(path, values) -> None:
    lines = [f"{float(v):.17g}" for v in np.ravel(values)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_golden(path) -> np.ndarray:
    return np.array([float(s) for s in Path(path).read_text().split()])
