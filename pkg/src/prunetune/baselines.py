"""Fine-tuning baselines that share :class:`~prunetune.training.Trainer`.

All strategies start from a dense general model, reset Adam moments, keep
the learning-rate clock running from the general run, and draw batches
from the same seeded stream, so with their extra features switched off
they all reduce to :func:`full_finetune` bit for bit.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .data import ParallelCorpus, encode_pairs
from .errors import ContractError
from .masks import BinaryMask
from .model import AdapterConfig, PAD, has_adapters, logits_graph, loss_builder
from .optim import AdamState
from .tensor import Graph, value_and_grad
from .training import Batcher, Trainer

STRATEGIES = ("finetune", "ewc", "distill", "layer-freeze", "adapter")


def _pairs(corpus):
    if isinstance(corpus, ParallelCorpus):
        corpus = corpus["train"]
    return encode_pairs(corpus)


def finetune_trainer(state, corpus, update_mask=None, build=None, prepare=None,
                     params=None):
    """Trainer and batch stream shared by every baseline.

    Works on a copy of ``params`` (default ``state.params``) with fresh Adam
    moments and the learning-rate clock continued from ``state``.
    """
    params = (params if params is not None else state.params).copy()
    adam = AdamState.fresh(params, state.train_config.schedule, clock=state.adam.global_step)
    trainer = Trainer(state.config, params, adam, state.train_config,
                      update_mask=update_mask, build=build, prepare=prepare)
    batches = Batcher(_pairs(corpus), state.train_config.batch_size,
                      state.train_config.seed * 1000003 + 101)
    return trainer, batches


def _finetune(state, corpus, steps, callback=None, every=100, **kwargs):
    trainer, batches = finetune_trainer(state, corpus, **kwargs)
    return trainer.run(batches, steps, callback=callback, every=every)


def full_finetune(state, corpus, steps, callback=None, every=100):
    """Continue training every parameter on the target corpus."""
    return _finetune(state, corpus, steps, callback=callback, every=every)


# -- layer freeze -------------------------------------------------------------


def top_layer_mask(config, params, num_top_layers=1) -> BinaryMask | None:
    """Mask of the top ``num_top_layers`` blocks per side plus the output bias.

    Returns None (nothing frozen) once ``num_top_layers`` covers every layer.
    """
    L = config.num_layers
    if num_top_layers >= L:
        return None
    arrays = {}
    for n, p in params.items():
        tag = params.tags[n]
        top = tag.group == "output_projection" or (
            tag.group in ("attention", "ffn", "layer_norm", "adapter")
            and L - num_top_layers <= tag.layer < L
        )
        arrays[n] = np.full(p.shape, top, dtype=bool)
    return BinaryMask(arrays)


def layer_freeze_tune(state, corpus, steps, num_top_layers=1, callback=None, every=100):
    """Tune only the top encoder and decoder blocks and the output projection."""
    if num_top_layers < 1:
        raise ContractError("num_top_layers must be >= 1")
    if state.config.num_layers == 1:
        warnings.warn("with one layer per side, layer freeze tunes nearly everything",
                      stacklevel=2)
    mask = top_layer_mask(state.config, state.params, num_top_layers)
    return _finetune(state, corpus, steps, update_mask=mask, callback=callback, every=every)


# -- adapters -----------------------------------------------------------------


def adapter_tune(state, adapter_config: AdapterConfig, corpus, steps, callback=None,
                 every=100):
    """Tune only adapter tensors; ``state.params`` must already carry adapters."""
    params = state.params
    if not has_adapters(params):
        raise ContractError("attach adapters before adapter tuning")
    widths = {params[n].shape[1] for n in params
              if params.tags[n].group == "adapter" and n.endswith("down.w")}
    if widths != {adapter_config.bottleneck_dim}:
        raise ContractError(f"attached adapters have bottleneck {widths}")
    mask = BinaryMask({
        n: np.full(p.shape, params.tags[n].group == "adapter", dtype=bool)
        for n, p in params.items()
    })
    return _finetune(state, corpus, steps, update_mask=mask, callback=callback, every=every)


# -- EWC ----------------------------------------------------------------------


@dataclass
class EwcState:
    """Anchor parameters, diagonal importance weights and penalty strength."""

    anchor: dict
    fisher: dict
    strength: float = 1.0

    def __post_init__(self):
        if self.strength < 0:
            raise ContractError("EWC strength must be non-negative")
        for n, f in self.fisher.items():
            if np.shape(f) != np.shape(self.anchor[n]):
                raise ContractError(f"importance for {n!r} has the wrong shape")
            if (np.asarray(f) < 0).any():
                raise ContractError(f"importance for {n!r} is negative")


def estimate_fisher(state, corpus, num_batches=50, seed=0) -> dict:
    """Mean squared gradient of the general-domain loss over ``num_batches``."""
    build = loss_builder(state.config, state.train_config.label_smoothing)
    batches = Batcher(_pairs(corpus), state.train_config.batch_size, seed)
    fisher = {n: np.zeros_like(p) for n, p in state.params.items()}
    for _ in range(num_batches):
        _, grads = value_and_grad(build, state.params, next(batches))
        for n, g in grads.items():
            fisher[n] += g * g
    return {n: f / num_batches for n, f in fisher.items()}


def ewc_penalty(params, ewc: EwcState) -> float:
    """``strength / 2 * sum(F * (theta - anchor)**2)``."""
    total = 0.0
    for n, f in ewc.fisher.items():
        d = params[n] - ewc.anchor[n]
        total += float((f * d * d).sum())
    return 0.5 * ewc.strength * total


def add_ewc_penalty(g: Graph, loss, ewc: EwcState):
    terms = []
    for n, f in ewc.fisher.items():
        d = g.sub(g.param(n), g.constant(ewc.anchor[n]))
        terms.append(g.sum(g.mul(g.constant(f), g.mul(d, d))))
    penalty = terms[0]
    for t in terms[1:]:
        penalty = g.add(penalty, t)
    return g.add(loss, g.scale(penalty, 0.5 * ewc.strength), name="loss")


def ewc_penalty_builder(ewc: EwcState):
    """Build function whose ``loss`` is the EWC penalty alone."""

    def build(g, inputs):
        zero = g.constant(0.0)
        return {"loss": add_ewc_penalty(g, zero, ewc)}

    return build


def ewc_builder(config, ewc: EwcState, label_smoothing=0.0):
    base = loss_builder(config, label_smoothing)
    if ewc.strength == 0:
        return base

    def build(g, inputs):
        out = base(g, inputs)
        return {"loss": add_ewc_penalty(g, out["loss"], ewc), "logits": out["logits"]}

    return build


def ewc_finetune(state, ewc: EwcState, corpus, steps, callback=None, every=100):
    """Fine-tune with the quadratic EWC penalty anchored at ``ewc.anchor``."""
    if ewc.strength < 0:
        raise ContractError("EWC strength must be non-negative")
    build = ewc_builder(state.config, ewc, state.train_config.label_smoothing)
    return _finetune(state, corpus, steps, build=build, callback=callback, every=every)


# -- distillation -------------------------------------------------------------


@dataclass
class DistillState:
    teacher: dict
    alpha: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ContractError("alpha must be within [0, 1]")


def teacher_probs(config, teacher, batch) -> np.ndarray:
    g = Graph(teacher)
    logits = logits_graph(g, config, batch["src"], batch["tgt_in"]).value
    flat = logits.reshape(-1, logits.shape[-1])
    z = flat - flat.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def distill_objective(g: Graph, logits, targets, teacher, alpha, label_smoothing=0.0):
    """``(1 - alpha) * NLL + alpha * KL(teacher || student)`` on flat logits.

    Args:
        g: Graph holding ``logits``.
        logits: Student logits node of shape ``(N, V)``.
        targets: ``N`` gold ids; PAD positions are ignored by both terms.
        teacher: Teacher token distributions, ``(N, V)``.
        alpha: Weight of the KL term.
        label_smoothing: Passed to the NLL term.

    Returns:
        ``(loss, nll, kl)`` nodes.
    """
    targets = np.asarray(targets).reshape(-1)
    weights = (targets != PAD).astype(np.float64)
    nll = g.cross_entropy(logits, targets, weights, label_smoothing)
    kl = g.kl_divergence(logits, teacher, weights)
    if alpha == 1:
        loss = g.scale(kl, 1.0, name="loss")
    else:
        loss = g.add(g.scale(nll, 1.0 - alpha), g.scale(kl, alpha), name="loss")
    return loss, nll, kl


def distill_builder(config, distill: DistillState, label_smoothing=0.0):
    """Build function for :func:`distill_objective` over the model's logits.

    Expects ``inputs["teacher_probs"]`` of shape ``(B * T, V)``.
    """
    base = loss_builder(config, label_smoothing)
    if distill.alpha == 0:
        return base

    def build(g, inputs):
        logits = logits_graph(g, config, inputs["src"], inputs["tgt_in"])
        B, T, V = logits.shape
        flat = g.reshape(logits, (B * T, V))
        loss, nll, kl = distill_objective(g, flat, inputs["tgt_out"], inputs["teacher_probs"],
                                          distill.alpha, label_smoothing)
        return {"loss": loss, "logits": flat, "kl": kl, "nll": nll}

    return build


def distill_finetune(state, distill: DistillState, corpus, steps, callback=None, every=100):
    """Fine-tune while pulling token distributions toward the frozen teacher."""
    if not 0.0 <= distill.alpha <= 1.0:
        raise ContractError("alpha must be within [0, 1]")
    build = distill_builder(state.config, distill, state.train_config.label_smoothing)

    def with_teacher(batch):
        return dict(batch, teacher_probs=teacher_probs(state.config, distill.teacher, batch))

    prepare = with_teacher if distill.alpha > 0 else None
    return _finetune(state, corpus, steps, build=build, prepare=prepare,
                     callback=callback, every=every)

