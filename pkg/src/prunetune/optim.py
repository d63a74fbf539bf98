"""Mask-aware Adam and the warm-up / inverse-square-root learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, ShapeError


@dataclass(frozen=True)
class LRSchedule:
    """Learning rate as a function of the global step (1-based).

    ``inverse_sqrt`` warms up linearly to ``peak`` over ``warmup`` steps and
    then decays as ``peak * sqrt(warmup / step)``. This is the Transformer
    schedule ``d**-0.5 * min(t**-0.5, t * w**-1.5)`` rescaled so that its
    maximum equals ``peak``. ``constant`` always returns ``peak``.
    """

    kind: str = "inverse_sqrt"
    peak: float = 2e-3
    warmup: int = 400

    def __post_init__(self):
        if self.kind not in ("inverse_sqrt", "constant"):
            raise ContractError(f"unknown schedule {self.kind!r}")
        if self.peak < 0 or self.warmup < 1:
            raise ContractError("schedule needs peak >= 0 and warmup >= 1")

    def __call__(self, step: int) -> float:
        if self.kind == "constant":
            return self.peak
        step = max(int(step), 1)
        return self.peak * min(step / self.warmup, math.sqrt(self.warmup / step))


@dataclass
class AdamState:
    """First/second moments plus step counters.

    ``step`` drives bias correction and restarts when the moments are reset;
    ``clock`` is the number of steps taken before the reset, so the learning
    rate schedule keeps running across stages (``lr = schedule(clock + step)``).
    """

    m: dict
    v: dict
    step: int = 0
    clock: int = 0
    schedule: LRSchedule = field(default_factory=LRSchedule)
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9

    @classmethod
    def fresh(cls, params, schedule=None, clock=0, **hyper) -> "AdamState":
        return cls(
            m={n: np.zeros_like(p, dtype=np.float64) for n, p in params.items()},
            v={n: np.zeros_like(p, dtype=np.float64) for n, p in params.items()},
            clock=clock,
            schedule=schedule or LRSchedule(),
            **hyper,
        )

    @property
    def global_step(self) -> int:
        return self.clock + self.step

    def reset(self, params=None) -> "AdamState":
        """Zero moments (optionally rebinding to ``params``), keep the clock."""
        return AdamState.fresh(
            params if params is not None else self.m,
            schedule=self.schedule,
            clock=self.global_step,
            beta1=self.beta1,
            beta2=self.beta2,
            eps=self.eps,
        )

    def copy(self) -> "AdamState":
        return AdamState(
            m={n: a.copy() for n, a in self.m.items()},
            v={n: a.copy() for n, a in self.v.items()},
            step=self.step,
            clock=self.clock,
            schedule=self.schedule,
            beta1=self.beta1,
            beta2=self.beta2,
            eps=self.eps,
        )


def adam_step(params, grads, state: AdamState, update_mask=None):
    """Apply one Adam update in place and return ``(params, state)``.

    Positions where ``update_mask`` is 0 keep their parameter value and both
    moment entries bit-identical. The step counter always advances.
    Arrays are replaced rather than written through, so earlier references
    to them stay valid snapshots.
    """
    if set(params) != set(state.m):
        raise ContractError("Adam state is bound to a different parameter set")
    state.step += 1
    t = state.step
    lr = state.schedule(state.global_step)
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}", name)
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * (g * g)
        new_p = p - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        mask = None if update_mask is None else update_mask.get(name)
        if mask is not None:
            if mask.shape != p.shape:
                raise ShapeError(f"mask shape {mask.shape} != parameter shape {p.shape}", name)
            if not mask.any():
                continue
            if not mask.all():
                m = np.where(mask, m, state.m[name])
                v = np.where(mask, v, state.v[name])
                new_p = np.where(mask, new_p, p)
        state.m[name] = m
        state.v[name] = v
        params[name] = new_p
    return params, state
