"""scikit-learn style wrapper around the Prune-Tune pipeline.

Sequences are lists of symbol ids in ``[0, vocab_size - 3)``; the three
special tokens are added internally.

Example:
    >>> est = PruneTuneTranslator(general_steps=1200)
    >>> est.fit(general_src, general_tgt)                     # doctest: +SKIP
    >>> est.partial_fit(med_src, med_tgt, domain="med")       # doctest: +SKIP
    >>> est.predict(med_test_src, domain="med")               # doctest: +SKIP
"""

from __future__ import annotations

import numbers

from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .adaptation import GENERAL, DomainSpec, extract_general_subnet, prune_tune, train_general
from .data import SPECIALS, symbols_to_ids
from .decoding import greedy_decode, translate
from .errors import ContractError
from .masks import inference_mask
from .metrics import token_accuracy
from .model import ModelConfig
from .optim import LRSchedule
from .training import TrainConfig


def check_token_sequences(X, n_symbols: int, max_len: int | None = None, name="X"):
    """Validate a batch of token sequences and return it as lists of ints.

    Raises:
        ContractError: if ``X`` is empty, a sequence is empty or too long, or
            a token is not an integer in ``[0, n_symbols)``.
    """
    if isinstance(X, (str, bytes)) or not hasattr(X, "__len__"):
        raise ContractError(f"{name} must be a sequence of token sequences")
    if len(X) == 0:
        raise ContractError(f"{name} is empty")
    out = []
    for i, seq in enumerate(X):
        if isinstance(seq, (str, bytes)) or not hasattr(seq, "__iter__"):
            raise ContractError(f"{name}[{i}] is not a token sequence")
        seq = list(seq)
        if not seq:
            raise ContractError(f"{name}[{i}] is empty")
        if max_len is not None and len(seq) > max_len:
            raise ContractError(f"{name}[{i}] has {len(seq)} tokens, limit is {max_len}")
        for tok in seq:
            if isinstance(tok, bool) or not isinstance(tok, numbers.Integral):
                raise ContractError(f"{name}[{i}] holds non-integer token {tok!r}")
            if not 0 <= tok < n_symbols:
                raise ContractError(f"{name}[{i}] token {tok} outside [0, {n_symbols})")
        out.append([int(t) for t in seq])
    return out


def check_parallel(X, y, n_symbols: int, max_len: int | None = None):
    """Validate source/target batches of equal length; return lists of pairs."""
    X = check_token_sequences(X, n_symbols, max_len, "X")
    y = check_token_sequences(y, n_symbols, max_len, "y")
    if len(X) != len(y):
        raise ContractError(f"X has {len(X)} sequences but y has {len(y)}")
    return list(zip(X, y))


class PruneTuneTranslator(BaseEstimator):
    """One network, many domains: fit on general data, partial_fit per domain.

    Args:
        num_layers, model_dim, ffn_dim, heads, vocab_size, max_len: Model
            architecture (``vocab_size`` includes the 3 special tokens).
        general_steps: Dense training steps in :meth:`fit`.
        general_sparsity: Fraction of eligible weights pruned from the
            general model and left free for later domains.
        prune_steps: Recovery training steps while pruning.
        budget: Default per-domain fraction of eligible weights.
        warmup_steps, tune_steps: Lottery warm-up and tuning lengths.
        batch_size, peak_lr, lr_warmup: Optimization settings.
        multi_domain: Freeze embeddings and layer norms for all domains.
        beam_width, length_penalty: Decoding; ``beam_width=1`` is greedy.
        random_state: Seed for initialization and batching.
    """

    def __init__(self, num_layers=2, model_dim=64, ffn_dim=128, heads=2, vocab_size=64,
                 max_len=32, general_steps=1200, general_sparsity=0.5, prune_steps=800,
                 budget=0.1, warmup_steps=200, tune_steps=600, batch_size=32, peak_lr=2e-3,
                 lr_warmup=400, multi_domain=False, beam_width=1, length_penalty=0.6,
                 random_state=0):
        self.num_layers = num_layers
        self.model_dim = model_dim
        self.ffn_dim = ffn_dim
        self.heads = heads
        self.vocab_size = vocab_size
        self.max_len = max_len
        self.general_steps = general_steps
        self.general_sparsity = general_sparsity
        self.prune_steps = prune_steps
        self.budget = budget
        self.warmup_steps = warmup_steps
        self.tune_steps = tune_steps
        self.batch_size = batch_size
        self.peak_lr = peak_lr
        self.lr_warmup = lr_warmup
        self.multi_domain = multi_domain
        self.beam_width = beam_width
        self.length_penalty = length_penalty
        self.random_state = random_state

    @property
    def _n_symbols(self):
        return self.vocab_size - len(SPECIALS)

    def _model_config(self):
        return ModelConfig(self.num_layers, self.model_dim, self.ffn_dim, self.heads,
                           self.vocab_size, self.max_len)

    def _check(self, X, y=None):
        limit = self.max_len - 2
        if y is None:
            return check_token_sequences(X, self._n_symbols, limit)
        return check_parallel(X, y, self._n_symbols, limit)

    def fit(self, X, y):
        """Train the general model and extract its sub-network."""
        pairs = self._check(X, y)
        config = self._model_config()
        train = TrainConfig(self.batch_size, LRSchedule(peak=self.peak_lr, warmup=self.lr_warmup))
        state = train_general(config, pairs, self.general_steps, seed=self.random_state,
                              train_config=train, multi_domain=self.multi_domain)
        if self.general_sparsity > 0:
            state, _ = extract_general_subnet(state, self.general_sparsity, pairs,
                                              steps=self.prune_steps)
        else:
            state.registry.assign_domain(GENERAL, state.registry.free_mask())
        self.state_ = state
        self.domains_ = [GENERAL]
        return self

    def partial_fit(self, X, y, domain, budget=None, ancestors=(GENERAL,)):
        """Adapt to a new ``domain`` inside the free parameters."""
        check_is_fitted(self, "state_")
        if domain in self.domains_:
            raise ContractError(f"domain {domain!r} is already fitted")
        pairs = self._check(X, y)
        spec = DomainSpec(domain, pairs, self.budget if budget is None else budget,
                          self.warmup_steps, self.tune_steps, ancestors)
        prune_tune(self.state_, spec)
        self.domains_.append(domain)
        return self

    def predict(self, X, domain=GENERAL):
        """Decode each source sequence with ``domain``'s sub-network."""
        check_is_fitted(self, "state_")
        X = self._check(X)
        config = self.state_.config
        mask = inference_mask(self.state_.registry, domain)
        srcs = [symbols_to_ids(s) for s in X]
        if self.beam_width == 1:
            hyps = greedy_decode(config, self.state_.params, srcs, mask)
        else:
            hyps = [translate(config, self.state_.params, mask, s, self.beam_width,
                              self.length_penalty) for s in srcs]
        return [[t - len(SPECIALS) for t in h if t >= len(SPECIALS)] for h in hyps]

    def score(self, X, y, domain=GENERAL):
        """Token accuracy of :meth:`predict` against ``y``."""
        pairs = self._check(X, y)
        hyps = self.predict([s for s, _ in pairs], domain)
        return token_accuracy(hyps, [t for _, t in pairs])

    def tuned_param_counts(self) -> dict:
        check_is_fitted(self, "state_")
        return self.state_.registry.counts()


__all__ = ["PruneTuneTranslator", "check_parallel", "check_token_sequences"]
