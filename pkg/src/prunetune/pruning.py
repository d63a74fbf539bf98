"""Gradual magnitude pruning with per-tensor quotas."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ContractError
from .masks import BinaryMask

SCHEDULE_KINDS = ("cubic", "linear", "oneshot")


@dataclass(frozen=True)
class PruneSchedule:
    """When and how hard to prune.

    Sparsity rises from ``initial_sparsity`` at ``start_step`` to
    ``final_sparsity`` at ``start_step + num_prunings * prune_interval``;
    a prune event fires at every ``start_step + k * prune_interval``,
    ``k = 0..num_prunings``. Sparsities are fractions of the *eligible*
    elements of each tensor.
    """

    initial_sparsity: float = 0.0
    final_sparsity: float = 0.5
    start_step: int = 0
    prune_interval: int = 100
    num_prunings: int = 10
    kind: str = "cubic"

    def __post_init__(self):
        if not 0.0 <= self.initial_sparsity <= self.final_sparsity <= 1.0:
            raise ContractError("need 0 <= initial_sparsity <= final_sparsity <= 1")
        if self.initial_sparsity >= 1.0:
            raise ContractError("initial_sparsity must be < 1")
        if self.start_step < 0 or self.prune_interval < 1 or self.num_prunings < 1:
            raise ContractError("need start_step >= 0, prune_interval >= 1, num_prunings >= 1")
        if self.kind not in SCHEDULE_KINDS:
            raise ContractError(f"unknown schedule kind {self.kind!r}")

    @property
    def end_step(self) -> int:
        return self.start_step + self.num_prunings * self.prune_interval

    def prune_steps(self) -> list[int]:
        return [self.start_step + k * self.prune_interval for k in range(self.num_prunings + 1)]

    @classmethod
    def spanning(cls, total_steps, final_sparsity, interval=100, initial_sparsity=0.0,
                 kind="cubic"):
        """Schedule whose prune events cover the middle half of ``total_steps``.

        ``interval`` shrinks for runs shorter than two intervals so the last
        event still lands inside the run.
        """
        if total_steps < 2:
            raise ContractError("a pruning run needs at least 2 steps")
        interval = min(interval, total_steps // 2)
        n = max(1, (total_steps // 2) // interval)
        start = max(0, (total_steps - n * interval) // 2)
        return cls(initial_sparsity, final_sparsity, start, interval, n, kind)


def sparsity_at(schedule: PruneSchedule, t) -> float:
    """Target sparsity at (local) training step ``t``."""
    s_i, s_f = schedule.initial_sparsity, schedule.final_sparsity
    if t <= schedule.start_step and schedule.kind != "oneshot":
        return s_i
    if t >= schedule.end_step:
        return s_f
    if schedule.kind == "oneshot":
        return s_i
    progress = (t - schedule.start_step) / (schedule.num_prunings * schedule.prune_interval)
    progress = min(max(progress, 0.0), 1.0)
    if schedule.kind == "linear":
        return s_i + (s_f - s_i) * progress
    return s_f + (s_i - s_f) * (1.0 - progress) ** 3


def prune_quota(target_sparsity, eligible_count) -> int:
    return int(math.floor(target_sparsity * eligible_count))


def _smallest(values, candidates, k):
    """Boolean mask of the ``k`` smallest-|value| candidates (lower index wins ties)."""
    out = np.zeros(values.shape, dtype=bool)
    if k <= 0:
        return out
    idx = np.flatnonzero(candidates.reshape(-1))
    mags = np.abs(values.reshape(-1)[idx])
    order = np.lexsort((idx, mags))
    out.reshape(-1)[idx[order[:k]]] = True
    return out


def magnitude_prune_layer(values, eligible, target_sparsity) -> np.ndarray:
    """Mark the ``floor(target * #eligible)`` smallest eligible magnitudes.

    Returns a boolean array where True means *pruned*. Ineligible elements
    are never marked.
    """
    if not 0.0 <= target_sparsity <= 1.0:
        raise ContractError("target sparsity must be within [0, 1]")
    values = np.asarray(values, dtype=np.float64)
    eligible = np.asarray(eligible, dtype=bool)
    if eligible.shape != values.shape:
        raise ContractError("eligible mask does not match values")
    return _smallest(values, eligible, prune_quota(target_sparsity, int(eligible.sum())))


def keep_largest(values, candidates, k) -> np.ndarray:
    """Boolean mask keeping the ``k`` largest-|value| candidates."""
    candidates = np.asarray(candidates, dtype=bool)
    n = int(candidates.sum())
    if k > n:
        raise ContractError(f"cannot keep {k} of {n} candidates")
    return candidates & ~_smallest(np.asarray(values), candidates, n - k)


@dataclass
class PruneEvent:
    step: int
    target: float
    pruned: dict
    sparsity: dict

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def write_events(events, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in events:
            fh.write(e.to_json() + "\n")


def read_events(path) -> list[PruneEvent]:
    with open(path, encoding="utf-8") as fh:
        return [PruneEvent(**json.loads(line)) for line in fh if line.strip()]


def prune_event(params, eligible: BinaryMask, pruned: dict, target: float, step: int) -> PruneEvent:
    """Grow every tensor's pruned set to its quota and zero the pruned weights.

    ``pruned`` (name -> bool array) is updated in place; previously pruned
    elements always stay pruned.
    """
    counts, achieved = {}, {}
    for name, elig in eligible.items():
        total = int(elig.sum())
        if total == 0:
            continue
        quota = prune_quota(target, total)
        have = int(pruned[name].sum())
        fresh = _smallest(params[name], elig & ~pruned[name], quota - have)
        pruned[name] = pruned[name] | fresh
        params[name] = np.where(pruned[name], 0.0, params[name])
        counts[name] = int(fresh.sum())
        achieved[name] = int(pruned[name].sum()) / total
    return PruneEvent(step, float(target), counts, achieved)


def gradual_prune(trainer, schedule: PruneSchedule, batches, eligible: BinaryMask,
                  steps=None):
    """Interleave training with magnitude pruning.

    Args:
        trainer: :class:`~prunetune.training.Trainer` owning params and Adam.
        schedule: When to prune and to which sparsity; steps are counted
            from the start of this call.
        batches: Iterator of training batches (the recovery data).
        eligible: Elements that may be pruned; everything else is untouched.
        steps: Total training steps (default ``schedule.end_step``); must be
            at least ``schedule.end_step``.

    Returns:
        ``(params, keep, events)`` where ``keep`` marks eligible survivors.
    """
    steps = schedule.end_step if steps is None else int(steps)
    if steps < schedule.end_step:
        raise ContractError(f"{steps} steps cannot reach the schedule end {schedule.end_step}")
    eligible.check_congruent(trainer.params)
    pruned = {n: np.zeros(a.shape, dtype=bool) for n, a in eligible.items()}
    points = set(schedule.prune_steps())
    events = []
    for t in range(steps + 1):
        if t in points:
            events.append(prune_event(trainer.params, eligible, pruned,
                                      sparsity_at(schedule, t), t))
            trainer.restrict(~BinaryMask(pruned))
        if t < steps:
            trainer.step(next(batches))
    keep = eligible - BinaryMask(pruned)
    return trainer.params, keep, events
