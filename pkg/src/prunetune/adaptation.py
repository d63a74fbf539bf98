"""The Prune-Tune pipeline.

1. :func:`train_general` trains a dense model on the general corpus.
2. :func:`extract_general_subnet` gradually prunes it; survivors become the
   frozen ``general`` domain and the pruned weights become the FREE pool.
3. :func:`generate_lottery_subnet` warms up the FREE pool on target data and
   keeps the largest-magnitude elements of each tensor up to the budget.
4. :func:`tune_domain` assigns that lottery sub-network to the new domain
   and trains only it.
5. :func:`sequential_adapt` repeats 3-4 for a list of domains.

FREE elements always hold 0.0 between stages. Every stage leaves values
outside its update mask bit-identical, so a finished domain decodes the same
way forever after.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .data import ParallelCorpus, encode_pairs
from .errors import CapacityError, ContractError, DataError
from .masks import (
    BinaryMask,
    MaskRegistry,
    inference_mask,
    new_registry,
    trainable_mask,
)
from .model import ModelConfig, init_params
from .optim import AdamState
from .pruning import PruneSchedule, gradual_prune, keep_largest, prune_quota
from .training import Batcher, TrainConfig, Trainer

log = logging.getLogger(__name__)

GENERAL = "general"


@dataclass
class DomainSpec:
    """A target domain: its data, parameter budget and tuning lengths.

    ``budget`` is a fraction of the eligible (non-frozen) elements of each
    tensor.
    """

    name: str
    corpus: ParallelCorpus
    budget: float = 0.1
    warmup_steps: int = 200
    tune_steps: int = 1000
    ancestors: tuple = (GENERAL,)

    def __post_init__(self):
        if not self.name:
            raise ContractError("domain name must be non-empty")
        if not 0.0 < self.budget <= 1.0:
            raise ContractError("budget must be in (0, 1]")
        if self.warmup_steps < 0 or self.tune_steps < 0:
            raise ContractError("step counts must be non-negative")
        self.ancestors = tuple(self.ancestors)


@dataclass
class PipelineState:
    config: ModelConfig
    params: object
    registry: MaskRegistry
    adam: AdamState
    train_config: TrainConfig
    history: list = field(default_factory=list)

    def copy(self) -> "PipelineState":
        return PipelineState(
            self.config,
            self.params.copy(),
            self.registry.copy(),
            self.adam.copy(),
            self.train_config,
            [dict(h) for h in self.history],
        )


def _pairs(corpus, split="train"):
    if isinstance(corpus, ParallelCorpus):
        corpus = corpus[split]
    pairs = encode_pairs(corpus)
    if not pairs:
        raise DataError("corpus is empty")
    return pairs


def _batches(state, corpus, salt):
    seed = state.train_config.seed * 1000003 + salt
    return Batcher(_pairs(corpus), state.train_config.batch_size, seed)


def train_general(config: ModelConfig, corpus, steps: int, seed: int = 0,
                  train_config: TrainConfig | None = None, multi_domain: bool = False,
                  frozen_groups=None) -> PipelineState:
    """Train a dense model on the general corpus from ``init_params(config, seed)``."""
    train_config = (train_config or TrainConfig()).with_seed(seed)
    params = init_params(config, seed)
    registry = new_registry(params, multi_domain, frozen_groups)
    adam = AdamState.fresh(params, train_config.schedule)
    state = PipelineState(config, params, registry, adam, train_config)
    if steps > 0:
        trainer = Trainer(config, params, adam, train_config)
        trainer.run(_batches(state, corpus, 0), steps)
    state.history.append({"stage": "train_general", "steps": steps,
                          "global_step": adam.global_step})
    return state


def extract_general_subnet(state: PipelineState, general_sparsity: float, corpus,
                           schedule: PruneSchedule | None = None, steps: int | None = None,
                           name: str = GENERAL):
    """Gradually prune to ``general_sparsity`` and freeze the survivors as ``name``.

    Returns ``(state, events)``. Pruned elements stay FREE and hold 0.0.
    """
    if name in state.registry.domain_names():
        raise ContractError(f"domain {name!r} is already assigned")
    if schedule is None:
        total = steps if steps is not None else 1000
        schedule = PruneSchedule.spanning(total, general_sparsity)
    elif schedule.final_sparsity != general_sparsity:
        raise ContractError("schedule final sparsity disagrees with general_sparsity")
    eligible = state.registry.free_mask()
    trainer = Trainer(state.config, state.params, state.adam, state.train_config,
                      update_mask=eligible)
    _, keep, events = gradual_prune(trainer, schedule, _batches(state, corpus, 1),
                                    eligible, steps)
    state.registry.assign_domain(name, keep, ())
    state.history.append({"stage": "extract", "domain": name, "sparsity": general_sparsity,
                          "global_step": state.adam.global_step})
    return state, events


def _quotas(registry: MaskRegistry, budget: float) -> dict[str, int]:
    return {n: prune_quota(budget, int(e.sum())) for n, e in registry.eligible_mask().items()}


def check_capacity(registry: MaskRegistry, budgets) -> None:
    """Raise CapacityError unless every tensor's FREE pool covers ``budgets``."""
    free = registry.free_mask().counts()
    need = {n: 0 for n in free}
    for b in budgets:
        for n, q in _quotas(registry, b).items():
            need[n] += q
    short = {n: (need[n], free[n]) for n in free if need[n] > free[n]}
    if short:
        name, (want, have) = next(iter(short.items()))
        raise CapacityError(
            f"budget needs {want} free elements in {name!r} but only {have} remain "
            f"({len(short)} tensors short)"
        )


def _warmup_forward_mask(registry, ancestors) -> BinaryMask:
    mask = registry.free_mask() | registry.frozen_mask()
    for a in ancestors:
        mask = mask | inference_mask(registry, a)
    return mask


def generate_lottery_subnet(state: PipelineState, spec: DomainSpec) -> BinaryMask:
    """Warm up the FREE pool on ``spec.corpus``, then keep the largest weights.

    Per tensor exactly ``floor(budget * eligible)`` FREE elements survive.
    FREE elements not selected are reset to 0.0. Returns the (unassigned)
    lottery mask.
    """
    registry = state.registry
    for a in spec.ancestors:
        registry.domain(a)
    check_capacity(registry, [spec.budget])
    free = registry.free_mask()
    if spec.warmup_steps:
        adam = state.adam.reset(state.params)
        trainer = Trainer(state.config, state.params, adam, state.train_config,
                          update_mask=free,
                          forward_mask=_warmup_forward_mask(registry, spec.ancestors))
        trainer.run(_batches(state, spec.corpus, 2 + 2 * len(registry.domains)),
                    spec.warmup_steps)
        state.adam = adam
    quotas = _quotas(registry, spec.budget)
    lottery = BinaryMask({
        n: keep_largest(state.params[n], free[n], quotas[n]) for n in state.params
    })
    for n in state.params:
        discard = free[n] & ~lottery[n]
        if discard.any():
            state.params[n] = np.where(discard, 0.0, state.params[n])
    return lottery


def domain_trainer(state: PipelineState, spec: DomainSpec, lottery: BinaryMask):
    """Assign ``lottery`` to ``spec.name``; return the tuning trainer and batches.

    The forward pass reads the domain's inference mask (its own elements,
    its ancestors and the frozen tensors). Adam moments are reset; the
    learning-rate clock continues.
    """
    state.registry.assign_domain(spec.name, lottery, spec.ancestors)
    state.adam = state.adam.reset(state.params)
    trainer = Trainer(state.config, state.params, state.adam, state.train_config,
                      update_mask=trainable_mask(state.registry, spec.name),
                      forward_mask=inference_mask(state.registry, spec.name))
    batches = _batches(state, spec.corpus, 3 + 2 * len(state.registry.domains))
    return trainer, batches


def tune_domain(state: PipelineState, spec: DomainSpec, lottery: BinaryMask,
                callback=None, every=100) -> PipelineState:
    """Assign ``lottery`` to ``spec.name`` and train only those elements."""
    trainer, batches = domain_trainer(state, spec, lottery)
    trainer.run(batches, spec.tune_steps, callback=callback, every=every)
    state.history.append({"stage": "tune", "domain": spec.name, "budget": spec.budget,
                          "tuned_params": lottery.popcount(),
                          "global_step": state.adam.global_step})
    return state


def prune_tune(state: PipelineState, spec: DomainSpec, callback=None, every=100):
    """Lottery generation followed by tuning for one domain."""
    lottery = generate_lottery_subnet(state, spec)
    return tune_domain(state, spec, lottery, callback=callback, every=every)


def sequential_adapt(state: PipelineState, specs, on_domain_done=None) -> PipelineState:
    """Adapt to each domain in order inside one network.

    ``on_domain_done(state, spec)`` runs after each domain finishes (e.g. to
    snapshot outputs for the zero-forgetting check).
    """
    specs = list(specs)
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise ContractError("domain names must be unique")
    check_capacity(state.registry, [s.budget for s in specs])
    for spec in specs:
        log.info("adapting domain %s (budget %.3f)", spec.name, spec.budget)
        prune_tune(state, spec)
        if on_domain_done is not None:
            on_domain_done(state, spec)
    return state
