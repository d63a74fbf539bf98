"""Shared masked training loop used by every strategy."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .decoding import pad_batch
from .errors import ContractError, NumericError
from .masks import BinaryMask
from .model import BOS, EOS, PAD, ModelConfig, loss_builder
from .optim import AdamState, LRSchedule, adam_step
from .tensor import value_and_grad


@dataclass(frozen=True)
class TrainConfig:
    """Optimization knobs. Gradient clipping and label smoothing are off by default."""

    batch_size: int = 32
    schedule: LRSchedule = field(default_factory=LRSchedule)
    label_smoothing: float = 0.0
    clip_norm: float = 0.0
    seed: int = 0

    def with_seed(self, seed):
        return replace(self, seed=seed)


def make_batch(pairs) -> dict:
    """Pad ``(src_ids, tgt_ids)`` pairs into model inputs."""
    srcs = [s for s, _ in pairs]
    tgts = [list(t) for _, t in pairs]
    width = max(len(t) for t in tgts) + 1
    tgt_in = np.full((len(pairs), width), PAD, dtype=np.int64)
    tgt_out = np.full((len(pairs), width), PAD, dtype=np.int64)
    for i, t in enumerate(tgts):
        tgt_in[i, : len(t) + 1] = [BOS] + t
        tgt_out[i, : len(t) + 1] = t + [EOS]
    return {"src": pad_batch(srcs), "tgt_in": tgt_in, "tgt_out": tgt_out}


class Batcher:
    """Endless seeded stream of shuffled mini-batches over ``pairs``."""

    def __init__(self, pairs, batch_size, seed=0):
        if not len(pairs):
            raise ContractError("cannot batch an empty corpus")
        self.pairs = list(pairs)
        self.batch_size = min(batch_size, len(self.pairs))
        self.rng = np.random.default_rng(seed)
        self._order = []

    def __iter__(self):
        return self

    def __next__(self):
        if len(self._order) < self.batch_size:
            self._order.extend(self.rng.permutation(len(self.pairs)).tolist())
        idx, self._order = self._order[: self.batch_size], self._order[self.batch_size :]
        return make_batch([self.pairs[i] for i in idx])


class Trainer:
    """Adam training with an update mask (what may change) and a forward mask
    (which parameters the model reads).

    Args:
        config: Model architecture.
        params: ParamStore, updated in place.
        adam: Optimizer state bound to ``params``.
        train: Optimization settings.
        update_mask: Positions Adam may change; None means all.
        forward_mask: Positions read as-is by the forward pass; others read 0.
        build: Graph build function producing a scalar ``loss`` output;
            defaults to the model's token NLL.
        prepare: Optional ``batch -> batch`` hook run before each step
            (e.g. to attach teacher distributions).
    """

    def __init__(self, config: ModelConfig, params, adam: AdamState, train: TrainConfig,
                 update_mask=None, forward_mask=None, build=None, prepare=None):
        self.config = config
        self.params = params
        self.adam = adam
        self.train_config = train
        self.update_mask = update_mask
        self.forward_mask = forward_mask
        self.build = build or loss_builder(config, train.label_smoothing)
        self.prepare = prepare
        self.losses: list[float] = []

    def restrict(self, mask: BinaryMask):
        """Intersect the update mask with ``mask``."""
        self.update_mask = mask if self.update_mask is None else self.update_mask & mask

    def step(self, batch) -> float:
        if self.prepare is not None:
            batch = self.prepare(batch)
        outputs, grads = value_and_grad(self.build, self.params, batch, "loss", self.forward_mask)
        loss = float(outputs["loss"])
        if not np.isfinite(loss):
            raise NumericError(f"non-finite loss at step {self.adam.global_step}")
        clip = self.train_config.clip_norm
        if clip:
            norm = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if norm > clip:
                grads = {n: g * (clip / norm) for n, g in grads.items()}
        adam_step(self.params, grads, self.adam, self.update_mask)
        self.losses.append(loss)
        return loss

    def run(self, batches, steps, callback=None, every=100):
        """Take ``steps`` steps; call ``callback(done, params)`` every ``every`` steps."""
        for i in range(steps):
            self.step(next(batches))
            if callback is not None and (i + 1) % every == 0:
                callback(i + 1, self.params)
        return self.params
