"""Feedforward sub-networks with batch normalization, hand-written backprop and Adam.

A sub-network maps ``x -> z`` through

    [BN(x)] -> [affine -> BN -> ReLU (+ skip)] * H -> affine -> BN

Parameters may carry leading "stack" axes, in which case one call evaluates
many independent sub-networks at once (one per time step in the solver).
Inputs then have shape ``stack + (B, d)``; batch statistics are always taken
over axis ``-2`` and never mix stack entries.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .numerics import NumericalError, RngStream, standard_normal


@dataclass(frozen=True)
class NetConfig:
    input_dim: int
    output_dim: int
    hidden_layers: int = 2
    hidden_width: Optional[int] = None  # None means input_dim + 10
    style: str = "plain"  # "plain" or "residual"
    bn_epsilon: float = 1e-6
    bn_momentum: float = 0.99
    input_bn: bool = True
    init: str = "xavier_uniform"  # or "xavier_normal"
    # multiplier on the identity skip of residual blocks; 0 recovers the plain net
    skip_scale: float = 1.0
    # fixed (non-trainable) factor applied to the network output
    output_scale: float = 1.0

    def __post_init__(self):
        if self.hidden_width is None:
            object.__setattr__(self, "hidden_width", self.input_dim + 10)
        if min(self.input_dim, self.output_dim, self.hidden_width) < 1:
            raise ValueError(f"layer widths must be positive: {self}")
        if self.hidden_layers < 0:
            raise ValueError(f"hidden_layers must be >= 0, got {self.hidden_layers}")
        if self.style not in ("plain", "residual"):
            raise ValueError(f"unknown style {self.style!r}")
        if self.init not in ("xavier_uniform", "xavier_normal"):
            raise ValueError(f"unknown init {self.init!r}")
        if not self.bn_epsilon > 0:
            raise ValueError("bn_epsilon must be positive")
        if not 0.0 < self.bn_momentum < 1.0:
            raise ValueError("bn_momentum must lie in (0, 1)")

    @property
    def widths(self) -> list[int]:
        return [self.input_dim] + [self.hidden_width] * self.hidden_layers + [self.output_dim]

    @property
    def trainable_layers(self) -> int:
        return self.hidden_layers + 1

    def to_dict(self) -> dict:
        return asdict(self)


def parameter_count(cfg: NetConfig) -> int:
    """Number of trainable scalars in one sub-network."""
    w = cfg.widths
    count = sum(a * b + b for a, b in zip(w[:-1], w[1:]))  # affine
    count += 2 * sum(w[1:])  # BN scale and shift
    if cfg.input_bn:
        count += 2 * cfg.input_dim
    return count


@dataclass
class SubNetParams:
    config: NetConfig
    stack: tuple[int, ...]
    tensors: dict[str, np.ndarray]
    moving: dict[str, np.ndarray]

    def __getitem__(self, index) -> "SubNetParams":
        """View of one entry (or a slice) along the leading stack axis."""
        if not self.stack:
            raise IndexError("parameters are not stacked")
        tensors = {k: v[index] for k, v in self.tensors.items()}
        moving = {k: v[index] for k, v in self.moving.items()}
        stack = np.empty(self.stack)[index].shape
        return SubNetParams(self.config, stack, tensors, moving)

    def copy(self) -> "SubNetParams":
        return SubNetParams(self.config, self.stack,
                            {k: v.copy() for k, v in self.tensors.items()},
                            {k: v.copy() for k, v in self.moving.items()})


def init_subnet(cfg: NetConfig, rng: RngStream, stack=()) -> SubNetParams:
    """Xavier weights, zero biases, unit BN scale, zero BN shift, moving stats (0, 1)."""
    stack = (stack,) if isinstance(stack, int) else tuple(stack)
    tensors: dict[str, np.ndarray] = {}
    moving: dict[str, np.ndarray] = {}
    if cfg.input_bn:
        tensors["in_gamma"] = np.ones(stack + (cfg.input_dim,))
        tensors["in_beta"] = np.zeros(stack + (cfg.input_dim,))
        moving["in_mean"] = np.zeros(stack + (cfg.input_dim,))
        moving["in_var"] = np.ones(stack + (cfg.input_dim,))
    widths = cfg.widths
    for k, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        shape = stack + (fan_in, fan_out)
        if cfg.init == "xavier_uniform":
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            tensors[f"w{k}"] = rng.uniform(shape, -limit, limit)
        else:
            tensors[f"w{k}"] = np.sqrt(2.0 / (fan_in + fan_out)) * standard_normal(rng, shape)
        tensors[f"b{k}"] = np.zeros(stack + (fan_out,))
        tensors[f"gamma{k}"] = np.ones(stack + (fan_out,))
        tensors[f"beta{k}"] = np.zeros(stack + (fan_out,))
        moving[f"mean{k}"] = np.zeros(stack + (fan_out,))
        moving[f"var{k}"] = np.ones(stack + (fan_out,))
    return SubNetParams(cfg, stack, tensors, moving)


def _row(v: np.ndarray) -> np.ndarray:
    return v[..., None, :]


def _swap(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


@dataclass
class _BnCache:
    xhat: np.ndarray
    inv_std: np.ndarray
    mean: np.ndarray
    var: np.ndarray


@dataclass
class ForwardCache:
    """Intermediates of one training-mode pass, consumed by :func:`backward`."""

    x: np.ndarray
    input_bn: Optional[_BnCache] = None
    layer_inputs: list = field(default_factory=list)
    bns: list = field(default_factory=list)
    masks: list = field(default_factory=list)
    skips: list = field(default_factory=list)


def _bn_train(a, gamma, beta, eps):
    mean = a.mean(axis=-2, keepdims=True)
    centered = a - mean
    var = (centered * centered).mean(axis=-2, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    return _row(gamma) * xhat + _row(beta), _BnCache(xhat, inv_std, mean[..., 0, :], var[..., 0, :])


def _bn_backward(g_out, gamma, c: _BnCache):
    g_xhat = g_out * _row(gamma)
    g_in = c.inv_std * (g_xhat - g_xhat.mean(axis=-2, keepdims=True)
                        - c.xhat * (g_xhat * c.xhat).mean(axis=-2, keepdims=True))
    return g_in, (g_out * c.xhat).sum(axis=-2), g_out.sum(axis=-2)


def _uses_skip(cfg: NetConfig, k: int) -> bool:
    widths = cfg.widths
    return cfg.style == "residual" and k < cfg.hidden_layers and widths[k] == widths[k + 1]


def _check_input(params: SubNetParams, x: np.ndarray) -> None:
    cfg = params.config
    if x.shape[-1] != cfg.input_dim or x.shape[:-2] != params.stack:
        raise ValueError(f"input shape {x.shape} does not match stack {params.stack} "
                         f"and input_dim {cfg.input_dim}")


def forward_train(params: SubNetParams, x: np.ndarray, update_stats: bool = True):
    """Training-mode pass with batch statistics; returns ``(z, cache)``."""
    x = np.asarray(x, dtype=np.float64)
    _check_input(params, x)
    if x.shape[-2] < 2:
        raise ValueError("training mode needs a batch of at least 2 rows")
    cfg, t = params.config, params.tensors
    eps = cfg.bn_epsilon
    cache = ForwardCache(x=x)
    stats = {}
    h = x
    if cfg.input_bn:
        h, cache.input_bn = _bn_train(h, t["in_gamma"], t["in_beta"], eps)
        stats["in"] = cache.input_bn
    for k in range(cfg.hidden_layers + 1):
        cache.layer_inputs.append(h)
        a = h @ t[f"w{k}"] + _row(t[f"b{k}"])
        y, bn = _bn_train(a, t[f"gamma{k}"], t[f"beta{k}"], eps)
        cache.bns.append(bn)
        stats[k] = bn
        if k == cfg.hidden_layers:
            h = cfg.output_scale * y
            break
        mask = y > 0.0
        cache.masks.append(mask)
        skip = _uses_skip(cfg, k)
        cache.skips.append(skip)
        h = y * mask
        if skip:
            h = h + cfg.skip_scale * cache.layer_inputs[k]
    if update_stats:
        _update_moving(params, stats)
    return h, cache


def _update_moving(params: SubNetParams, stats: dict, momentum: Optional[float] = None) -> None:
    m = params.config.bn_momentum if momentum is None else momentum
    for key, bn in stats.items():
        mean_key, var_key = ("in_mean", "in_var") if key == "in" else (f"mean{key}", f"var{key}")
        mv = params.moving
        mv[mean_key] *= m
        mv[mean_key] += (1.0 - m) * bn.mean
        mv[var_key] *= m
        mv[var_key] += (1.0 - m) * bn.var


def recalibrate(params: SubNetParams, x: np.ndarray) -> None:
    """Replace the moving statistics by the batch statistics of ``x``.

    With weights frozen this gives eval-mode outputs that match a training-mode
    pass over the same distribution, without the lag of the running average.
    """
    x = np.asarray(x, dtype=np.float64)
    _check_input(params, x)
    if x.shape[-2] < 2:
        raise ValueError("recalibration needs a batch of at least 2 rows")
    _, cache = forward_train(params, x, update_stats=False)
    stats = dict(enumerate(cache.bns))
    if cache.input_bn is not None:
        stats["in"] = cache.input_bn
    _update_moving(params, stats, momentum=0.0)


def forward_eval(params: SubNetParams, x: np.ndarray) -> np.ndarray:
    """Inference pass using the moving averages; any batch size."""
    x = np.asarray(x, dtype=np.float64)
    _check_input(params, x)
    cfg, t, mv = params.config, params.tensors, params.moving
    eps = cfg.bn_epsilon

    def bn(a, mean, var, gamma, beta):
        return _row(gamma) * (a - _row(mean)) / np.sqrt(_row(var) + eps) + _row(beta)

    h = x
    if cfg.input_bn:
        h = bn(h, mv["in_mean"], mv["in_var"], t["in_gamma"], t["in_beta"])
    for k in range(cfg.hidden_layers + 1):
        a = h @ t[f"w{k}"] + _row(t[f"b{k}"])
        y = bn(a, mv[f"mean{k}"], mv[f"var{k}"], t[f"gamma{k}"], t[f"beta{k}"])
        if k == cfg.hidden_layers:
            return cfg.output_scale * y
        r = np.maximum(y, 0.0)
        h = r + cfg.skip_scale * h if _uses_skip(cfg, k) else r
    raise AssertionError("unreachable")


def backward(params: SubNetParams, cache: ForwardCache, grad_z: np.ndarray):
    """Gradients of ``sum(grad_z * z)`` w.r.t. every trainable tensor and the input.

    Returns ``(grads, grad_x)``; ``grads`` has the same keys as ``params.tensors``.
    """
    cfg, t = params.config, params.tensors
    grad_z = np.asarray(grad_z, dtype=np.float64)
    expected = cache.x.shape[:-1] + (cfg.output_dim,)
    if grad_z.shape != expected:
        raise ValueError(f"grad_z has shape {grad_z.shape}, expected {expected}")
    grads: dict[str, np.ndarray] = {}
    g = cfg.output_scale * grad_z
    for k in range(cfg.hidden_layers, -1, -1):
        g_skip = None
        if k < cfg.hidden_layers:
            if cache.skips[k]:
                g_skip = cfg.skip_scale * g
            g = g * cache.masks[k]
        g_a, grads[f"gamma{k}"], grads[f"beta{k}"] = _bn_backward(g, t[f"gamma{k}"], cache.bns[k])
        grads[f"b{k}"] = g_a.sum(axis=-2)
        grads[f"w{k}"] = _swap(cache.layer_inputs[k]) @ g_a
        g = g_a @ _swap(t[f"w{k}"])
        if g_skip is not None:
            g = g + g_skip
    if cfg.input_bn:
        g, grads["in_gamma"], grads["in_beta"] = _bn_backward(g, t["in_gamma"], cache.input_bn)
    return grads, g


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, tensors: dict[str, np.ndarray], **hyper) -> "AdamState":
        return cls({k: np.zeros_like(v) for k, v in tensors.items()},
                   {k: np.zeros_like(v) for k, v in tensors.items()}, **hyper)


def adam_step(tensors: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, applied in place to ``tensors`` and ``state``."""
    for name, g in grads.items():
        if np.shape(g) != np.shape(tensors[name]):
            raise ValueError(f"gradient for {name} has shape {np.shape(g)}, "
                             f"parameter has {np.shape(tensors[name])}")
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for tensor {name!r}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    # lr * m_hat / (sqrt(v_hat) + eps), rearranged so every step is in place
    step_size = lr * np.sqrt(c2) / c1
    eps_scaled = state.eps * np.sqrt(c2)
    for name, g in grads.items():
        m, v = state.m[name], state.v[name]
        scratch = np.multiply(g, g)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        scratch *= 1.0 - b2
        v += scratch
        np.sqrt(v, out=scratch)
        scratch += eps_scaled
        np.divide(m, scratch, out=scratch)
        scratch *= step_size
        tensors[name] -= scratch


def save_tensors(path, tensors: dict[str, np.ndarray], meta: dict) -> None:
    """Write named float64 tensors plus JSON metadata to a single ``.npz`` file."""
    arrays = {f"t/{k}": np.asarray(v, dtype=np.float64) for k, v in tensors.items()}
    arrays["meta"] = np.array(json.dumps(meta, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(Path(path), allow_pickle=False) as data:
        tensors = {k[2:]: data[k] for k in data.files if k.startswith("t/")}
        meta = json.loads(str(data["meta"]))
    return tensors, meta


def save_subnet(path, params: SubNetParams) -> None:
    tensors = dict(params.tensors)
    tensors.update({f"moving/{k}": v for k, v in params.moving.items()})
    save_tensors(path, tensors, {"config": params.config.to_dict(), "stack": list(params.stack)})


def load_subnet(path) -> SubNetParams:
    tensors, meta = load_tensors(path)
    moving = {k[len("moving/"):]: tensors.pop(k) for k in list(tensors) if k.startswith("moving/")}
    return SubNetParams(NetConfig(**meta["config"]), tuple(meta["stack"]), tensors, moving)
