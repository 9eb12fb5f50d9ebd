"""Flow-matching core shared by the inverse dynamics model and the policy.

The probability path linearly interpolates data x toward Gaussian noise eps
as t runs 0 -> 1 (x_t = (1-t)x + t*eps), the regression target is the
constant velocity eps - x, and sampling integrates an Euler scheme from t=1
back to t=0. Time is drawn uniformly per item; all randomness is seeded.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

from .optim import AdamW, LrSchedule, wsd_lr
from .seeding import rng_for
from .tensor import Tensor


@dataclass
class FlowBatch:
    """One training batch: clean targets, matched noise, per-item time, conditioning."""
    clean: np.ndarray
    noise: np.ndarray
    time: np.ndarray                       # (B,) in [0, 1]
    conditioning: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.clean.shape != self.noise.shape:
            raise ValueError("clean and noise shapes differ")
        if np.any((self.time < 0) | (self.time > 1)):
            raise ValueError("time outside [0, 1]")


def _expand_time(t, ndim: int):
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 0:
        return t
    return t.reshape(t.shape + (1,) * (ndim - 1))


def interpolate(x: np.ndarray, eps: np.ndarray, t) -> np.ndarray:
    """(1-t)*x + t*eps elementwise; t scalar or per-item along axis 0."""
    x = np.asarray(x, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x.shape != eps.shape:
        raise ValueError("shape mismatch between data and noise")
    tt = _expand_time(t, x.ndim)
    if np.any((tt < 0) | (tt > 1)):
        raise ValueError("interpolation time outside [0, 1]")
    return (1.0 - tt) * x + tt * eps


def velocity_target(x: np.ndarray, eps: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x.shape != eps.shape:
        raise ValueError("shape mismatch between data and noise")
    return eps - x


def fm_loss(v_pred, x, eps) -> Tensor:
    """Mean squared error against the velocity target; differentiable in v_pred."""
    target = velocity_target(x, eps)
    v_pred = v_pred if isinstance(v_pred, Tensor) else Tensor(v_pred)
    if v_pred.shape != target.shape:
        raise ValueError("prediction shape differs from target")
    diff = v_pred - Tensor(target)
    return (diff * diff).mean()


class VelocityModel(Protocol):
    params: dict[str, Tensor]

    def velocity(self, x_t: np.ndarray, t: np.ndarray,
                 conditioning: dict[str, np.ndarray]) -> Tensor: ...


def euler_sample(velocity_fn: Callable[[np.ndarray, np.ndarray, dict], np.ndarray],
                 conditioning: dict, shape: tuple[int, ...], steps: int,
                 seed: int) -> np.ndarray:
    """Integrate from seeded noise at t=1 down to t=0 in `steps` Euler steps."""
    if steps < 1:
        raise ValueError("need at least one integration step")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(shape)
    dt = 1.0 / steps
    for k in range(steps):
        t = 1.0 - k * dt
        v = np.asarray(velocity_fn(x, np.full(shape[:1], t), conditioning))
        x = x - dt * v
    return x


@dataclass(frozen=True)
class TrainConfig:
    steps: int
    batch_size: int
    schedule: LrSchedule
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    seed: int = 0


def train_fm(model: VelocityModel,
             batch_fn: Callable[[int, np.random.Generator], tuple[np.ndarray, dict]],
             config: TrainConfig) -> list[float]:
    """Generic flow-matching loop: AdamW + schedule over seeded batches.

    batch_fn(step, rng) returns (clean, conditioning); noise and time are
    drawn here so all models share the same batch construction. Returns the
    per-step loss log. Zero steps leave the model untouched.
    """
    opt = AdamW(betas=config.betas, weight_decay=config.weight_decay)
    arrays = {name: t.data for name, t in model.params.items()}
    losses: list[float] = []
    for step_idx in range(config.steps):
        rng = rng_for(config.seed, "fm-step", step_idx)
        clean, conditioning = batch_fn(step_idx, rng)
        batch = FlowBatch(
            clean=np.asarray(clean, dtype=np.float64),
            noise=rng.standard_normal(clean.shape),
            time=rng.uniform(0.0, 1.0, size=len(clean)),
            conditioning=conditioning,
        )
        x_t = interpolate(batch.clean, batch.noise, batch.time)
        for t in model.params.values():
            t.grad = None
        try:
            v = model.velocity(x_t, batch.time, batch.conditioning)
            loss = fm_loss(v, batch.clean, batch.noise)
            loss.backward()
        except FloatingPointError as exc:
            raise RuntimeError(
                f"non-finite loss at step {step_idx} "
                f"(last finite losses: {losses[-3:]})") from exc
        grads = {name: t.grad if t.grad is not None else np.zeros_like(t.data)
                 for name, t in model.params.items()}
        opt.step(arrays, grads, lr=wsd_lr(step_idx, config.schedule))
        losses.append(loss.item())
    return losses
