"""Adam with bias correction over dicts of numpy arrays."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NonFiniteUpdate


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> tuple[dict, AdamState]:
    """One Adam update. ``lr`` is a float or a per-key dict. Inputs are not modified."""
    t = state.t + 1
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    new_params, m_out, v_out = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {k!r} {p.shape}")
        m = beta1 * state.m.get(k, np.zeros_like(p)) + (1.0 - beta1) * g
        v = beta2 * state.v.get(k, np.zeros_like(p)) + (1.0 - beta2) * (g * g)
        step = (lr[k] if isinstance(lr, dict) else lr) * (m / bc1) / (np.sqrt(v / bc2) + eps)
        if not np.all(np.isfinite(step)):
            raise NonFiniteUpdate(f"non-finite Adam update for {k!r}")
        new_params[k] = p - step
        m_out[k], v_out[k] = m, v
    return new_params, AdamState(m_out, v_out, t)


def step_schedule(iteration: int, total: int, lr: float, lr_final: float, drop_at: float) -> float:
    """Piecewise-constant schedule: ``lr`` until ``drop_at`` of the budget, then ``lr_final``."""
    return lr if iteration < drop_at * total else lr_final
