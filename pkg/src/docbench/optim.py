"""Optimizers, learning-rate schedules and freezing helpers.

Two regimes share this module: momentum SGD under a slanted-triangular
schedule with the linear batch-size scaling rule, and bias-corrected
adaptive moments with coupled L2 decay plus per-group (layer-wise) rates.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .layers import Network

LR_UNDERFLOW = 1e-12
REFERENCE_BATCH = 256


@dataclass(frozen=True)
class SgdConfig:
    momentum: float = 0.9
    weight_decay: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0,1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")


@dataclass(frozen=True)
class AdamConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.01

    def __post_init__(self):
        for name in ("beta1", "beta2"):
            b = getattr(self, name)
            if not 0.0 <= b < 1.0:
                raise ValueError(f"{name} must be in [0,1), got {b}")
        if self.epsilon <= 0 or self.weight_decay < 0:
            raise ValueError("epsilon must be > 0 and weight_decay >= 0")


@dataclass(frozen=True)
class StlrConfig:
    eta_max: float
    total_steps: int
    cut_frac: float = 0.1
    ratio: float = 32.0

    def __post_init__(self):
        if self.eta_max <= 0:
            raise ValueError(f"eta_max must be > 0, got {self.eta_max}")
        if not 0.0 < self.cut_frac < 1.0:
            raise ValueError(f"cut_frac must be in (0,1), got {self.cut_frac}")
        if self.ratio <= 1:
            raise ValueError(f"ratio must be > 1, got {self.ratio}")
        if self.cut < 1:
            raise ValueError(
                f"total_steps {self.total_steps} too small for cut_frac {self.cut_frac}")

    @property
    def cut(self) -> int:
        return int(math.floor(self.total_steps * self.cut_frac))


@dataclass(frozen=True)
class LayerwiseDecayConfig:
    eta_top: float = 1e-6
    eta_body: float = 3e-5
    xi: float = 0.95

    def __post_init__(self):
        if self.xi <= 0:
            raise ValueError(f"xi must be > 0, got {self.xi}")
        if self.eta_top <= 0 or self.eta_body <= 0:
            raise ValueError("eta_top and eta_body must be > 0")


def reference_lr(base: float, n: int, k: int) -> float:
    """Linear scaling rule: base * (global batch n*k) / 256."""
    if n < 1 or k < 1:
        raise ValueError(f"n and k must be >= 1, got n={n}, k={k}")
    return base * (n * k) / REFERENCE_BATCH


def stlr_lr(t: int, cfg: StlrConfig) -> float:
    """Slanted triangular rate at step t: linear ramp to eta_max at the cut
    step, then a long linear decay back toward eta_max/ratio at t=T."""
    if t < 0 or t > cfg.total_steps:
        raise ValueError(f"step {t} outside [0, {cfg.total_steps}]")
    cut = cfg.cut
    if t < cut:
        p = t / cut
    else:
        p = 1.0 - (t - cut) / (cut * (1.0 / cfg.cut_frac - 1.0))
    return cfg.eta_max * (1.0 + p * (cfg.ratio - 1.0)) / cfg.ratio


def layerwise_lrs(cfg: LayerwiseDecayConfig, num_layers: int):
    """Per-encoder-layer rates, bottom-up: the top layer gets eta_body and
    each step down multiplies by xi."""
    if num_layers < 1:
        raise ValueError(f"num_layers must be >= 1, got {num_layers}")
    rates = [cfg.eta_body * cfg.xi ** (num_layers - 1 - i) for i in range(num_layers)]
    if min(rates) < LR_UNDERFLOW:
        warnings.warn(
            f"layer-wise decay xi={cfg.xi} drives learning rates below "
            f"{LR_UNDERFLOW:g}; lower layers will not train", stacklevel=2)
    return rates


def group_lrs(cfg: LayerwiseDecayConfig, num_layers: int):
    """Map text-model group names to rates: encoder layers per layerwise_lrs,
    embedding tied to the deepest layer, head at eta_top."""
    rates = layerwise_lrs(cfg, num_layers)
    out = {"embedding": rates[0]}
    for i, lr in enumerate(rates, start=1):
        out[f"layer_{i}"] = lr
    out["head"] = cfg.eta_top
    return out


def _check_finite(name, grad):
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError(f"non-finite gradient for parameter {name!r}")


def sgd_step(params, grads, lr, cfg: SgdConfig, velocities=None):
    """One momentum step, in place.  params/grads are dicts keyed by name;
    velocities persists across calls (pass the same dict back in)."""
    if lr <= 0:
        raise ValueError(f"lr must be > 0, got {lr}")
    if velocities is None:
        velocities = {}
    for name, p in params.items():
        g = grads[name]
        _check_finite(name, g)
        v = velocities.get(name)
        if v is None:
            v = np.zeros_like(p)
        v = cfg.momentum * v + g + cfg.weight_decay * p
        velocities[name] = v
        p -= lr * v
    return params, velocities


def adam_step(params, grads, lr, cfg: AdamConfig, t: int, moments=None):
    """One bias-corrected adaptive step, in place; t counts from 1.

    Weight decay is the coupled L2 form: decay*param is added to the
    gradient before the moment updates.
    """
    if t < 1:
        raise ValueError(f"adam step index starts at 1, got {t}")
    if moments is None:
        moments = {}
    for name, p in params.items():
        g = grads[name]
        _check_finite(name, g)
        g = g + cfg.weight_decay * p
        m, v = moments.get(name, (None, None))
        if m is None:
            m, v = np.zeros_like(p), np.zeros_like(p)
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g
        moments[name] = (m, v)
        m_hat = m / (1.0 - cfg.beta1 ** t)
        v_hat = v / (1.0 - cfg.beta2 ** t)
        p -= lr * m_hat / (np.sqrt(v_hat) + cfg.epsilon)
    return params, moments


def freeze(net: Network, keep_trainable):
    """Freeze every group of net not named in keep_trainable; frozen
    parameters stay bit-identical under any optimizer."""
    return net.freeze(keep_trainable)


class Optimizer:
    """Steps one network's trainable parameters from their .grad fields.

    lr may be a constant or a schedule callable mapping step index (from 0)
    to a rate; group_rates, when given, overrides the rate per top-level
    group name (used for layer-wise fine-tuning).
    """

    def __init__(self, net: Network, lr, group_rates=None):
        self.net = net
        self._lr = lr
        self.group_rates = dict(group_rates) if group_rates else {}
        self.step_count = 0

    def current_lr(self, step=None):
        step = self.step_count if step is None else step
        return self._lr(step) if callable(self._lr) else self._lr

    def _rate_for(self, path, base_lr):
        return self.group_rates.get(path.split(".", 1)[0], base_lr)

    def _gather(self):
        params, grads = {}, {}
        for name, p in self.net.named_params():
            if not p.requires_grad or p.grad is None:
                continue
            params[name] = p.data
            grads[name] = p.grad
        return params, grads

    def zero_grad(self):
        for _, p in self.net.named_params():
            p.grad = None

    def step(self):
        raise NotImplementedError


class SgdOptimizer(Optimizer):
    def __init__(self, net, lr, cfg: SgdConfig = SgdConfig(), group_rates=None):
        super().__init__(net, lr, group_rates)
        self.cfg = cfg
        self.velocities = {}

    def step(self):
        base = self.current_lr()
        params, grads = self._gather()
        by_rate = {}
        for name in params:
            by_rate.setdefault(self._rate_for(name, base), []).append(name)
        for rate, names in by_rate.items():
            sgd_step({n: params[n] for n in names}, {n: grads[n] for n in names},
                     rate, self.cfg, self.velocities)
        self.step_count += 1
        return base


class AdamOptimizer(Optimizer):
    def __init__(self, net, lr, cfg: AdamConfig = AdamConfig(), group_rates=None):
        super().__init__(net, lr, group_rates)
        self.cfg = cfg
        self.moments = {}

    def step(self):
        base = self.current_lr()
        params, grads = self._gather()
        self.step_count += 1  # bias correction counts from 1
        by_rate = {}
        for name in params:
            by_rate.setdefault(self._rate_for(name, base), []).append(name)
        for rate, names in by_rate.items():
            adam_step({n: params[n] for n in names}, {n: grads[n] for n in names},
                      rate, self.cfg, self.step_count, self.moments)
        return base
