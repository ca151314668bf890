"""AdamW with decoupled weight decay, schedules, gradient clipping."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .numeric import ContractError, NumericError


def cosine_schedule(t: float, total: int, warmup: int, base: float, final: float) -> float:
    """Linear warmup from 0 to ``base`` over ``warmup`` steps, then cosine
    decay from ``base`` to ``final`` at ``t = total``."""
    if t < 0 or t > total:
        raise ContractError(f"schedule step {t} outside [0, {total}]")
    if warmup > total:
        raise ContractError("warmup longer than the schedule")
    if t < warmup:
        return base * t / warmup
    if total == warmup:
        return final if t == total else base
    progress = (t - warmup) / (total - warmup)
    return final + 0.5 * (base - final) * (1.0 + math.cos(math.pi * progress))


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(grads[k] * grads[k])) for k in sorted(grads))))


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float):
    norm = global_norm(grads)
    if max_norm and norm > max_norm:
        factor = max_norm / norm
        grads = {k: g * factor for k, g in grads.items()}
    return grads, norm


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


@dataclass
class AdamW:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def step(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
             state: OptimizerState, lr: float, wd: float,
             no_decay: frozenset[str] | set[str] = frozenset()) -> dict[str, np.ndarray]:
        """Return updated parameters; ``state`` is modified in place.

        Decay is applied as ``p ← p − lr·wd·p`` before the adaptive step and
        skipped for names in ``no_decay``.
        """
        for k, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for {k}")
            if np.shape(g) != np.shape(params[k]):
                raise ContractError(f"gradient shape {np.shape(g)} != parameter shape for {k}")
        state.step += 1
        t = state.step
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        out = dict(params)
        for k, g in grads.items():
            m = state.m.get(k)
            v = state.v.get(k)
            if m is None:
                m = np.zeros_like(g)
                v = np.zeros_like(g)
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            state.m[k], state.v[k] = m, v
            p = params[k]
            if wd and k not in no_decay:
                p = p - lr * wd * p
            out[k] = p - lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
        return out
