"""Token accuracy and corpus BLEU (multi-bleu.perl arithmetic)."""

from __future__ import annotations

import math
from collections import Counter

from .errors import ContractError


def token_accuracy(hyps, refs) -> float:
    """Fraction of aligned positions where hypothesis and reference agree.

    Each sentence contributes ``max(len(hyp), len(ref))`` positions, so a
    missing or surplus tail counts as wrong.
    """
    if len(hyps) != len(refs):
        raise ContractError(f"{len(hyps)} hypotheses vs {len(refs)} references")
    if not refs:
        raise ContractError("empty corpus")
    correct = total = 0
    for h, r in zip(hyps, refs):
        correct += sum(1 for a, b in zip(h, r) if a == b)
        total += max(len(h), len(r))
    return correct / total if total else 1.0


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu_stats(hyps, refs, max_n=4):
    """Clipped n-gram matches, hypothesis n-gram totals, and lengths."""
    matches = [0] * max_n
    totals = [0] * max_n
    hyp_len = ref_len = 0
    for h, r in zip(hyps, refs):
        h, r = list(h), list(r)
        hyp_len += len(h)
        ref_len += len(r)
        for n in range(1, max_n + 1):
            hc = _ngrams(h, n)
            rc = _ngrams(r, n)
            matches[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
            totals[n - 1] += max(len(h) - n + 1, 0)
    return matches, totals, hyp_len, ref_len


def corpus_bleu(hyps, refs, max_n=4) -> float:
    """Corpus BLEU in [0, 1] without smoothing.

    Any zero n-gram precision gives 0; the brevity penalty is
    ``exp(1 - r/c)`` when the hypothesis corpus is shorter than the
    reference corpus.
    """
    if len(hyps) != len(refs):
        raise ContractError(f"{len(hyps)} hypotheses vs {len(refs)} references")
    if not hyps:
        raise ContractError("empty hypothesis corpus")
    matches, totals, c, r = bleu_stats(hyps, refs, max_n)
    if c == 0:
        return 0.0
    log_p = 0.0
    for m, t in zip(matches, totals):
        if m == 0 or t == 0:
            return 0.0
        log_p += math.log(m / t)
    brevity = min(0.0, 1.0 - r / c)
    return math.exp(log_p / max_n + brevity)
