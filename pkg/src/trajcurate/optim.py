"""AdamW with decoupled weight decay, and the stable-then-decay LR schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["OptimizerState", "adamw_step", "AdamW", "LrSchedule", "wsd_lr"]


@dataclass
class OptimizerState:
    """Per-parameter first/second moments plus the shared step count."""
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)
    step_count: int = 0


def adamw_step(params: dict[str, np.ndarray],
               grads: dict[str, np.ndarray],
               state: OptimizerState,
               lr: float,
               betas: tuple[float, float] = (0.9, 0.999),
               eps: float = 1e-8,
               weight_decay: float = 0.0) -> tuple[dict[str, np.ndarray], OptimizerState]:
    """One AdamW update. Decay is decoupled: p <- p - lr*wd*p, not folded into grads."""
    if lr <= 0:
        raise ValueError("lr must be positive")
    b1, b2 = betas
    state.step_count += 1
    t = state.step_count
    out: dict[str, np.ndarray] = {}
    for name in params:
        p = params[name]
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != param shape {p.shape} for {name!r}")
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.first_moment[name] = m
        state.second_moment[name] = v
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        out[name] = p - lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * p)
    return out, state


class AdamW:
    """Stateful wrapper used by the training loops; updates arrays in place."""

    def __init__(self, betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = OptimizerState()

    def step(self, params: dict[str, np.ndarray],
             grads: dict[str, np.ndarray], lr: float) -> None:
        updated, _ = adamw_step(params, grads, self.state, lr,
                                betas=self.betas, eps=self.eps,
                                weight_decay=self.weight_decay)
        for name, arr in updated.items():
            params[name][...] = arr


@dataclass(frozen=True)
class LrSchedule:
    """Constant at base_lr for `stable_steps`, then linear decay to final_lr."""
    base_lr: float
    total_steps: int
    stable_steps: int
    final_lr: float = 0.0

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if not (0 <= self.stable_steps <= self.total_steps):
            raise ValueError("need 0 <= stable_steps <= total_steps")
        if self.final_lr < 0:
            raise ValueError("final_lr must be >= 0")


def wsd_lr(step: int, schedule: LrSchedule) -> float:
    if not (0 <= step <= schedule.total_steps):
        raise ValueError(f"step {step} outside [0, {schedule.total_steps}]")
    if step < schedule.stable_steps:
        return schedule.base_lr
    span = schedule.total_steps - schedule.stable_steps
    if span == 0:
        return schedule.final_lr
    frac = (step - schedule.stable_steps) / span
    return schedule.base_lr + frac * (schedule.final_lr - schedule.base_lr)
