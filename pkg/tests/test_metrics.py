import math

import numpy as np
import pytest

from prunetune.errors import ContractError
from prunetune.metrics import bleu_stats, corpus_bleu, token_accuracy

from reference import random_bleu_corpus, reference_bleu


def test_token_accuracy_example():
    assert token_accuracy([[1, 2, 3, 4]], [[1, 2, 0, 4]]) == 0.75


def test_token_accuracy_counts_length_mismatch():
    # 2 matches over max(2, 4) positions
    assert token_accuracy([[1, 2]], [[1, 2, 3, 4]]) == 0.5
    assert token_accuracy([[1, 2, 3, 4]], [[1, 2]]) == 0.5
    assert token_accuracy([[]], [[]]) == 1.0
    with pytest.raises(ContractError):
        token_accuracy([[1]], [])
    with pytest.raises(ContractError):
        token_accuracy([], [])


def test_bleu_perfect_and_empty():
    refs = [[1, 2, 3, 4, 5], [6, 7, 8, 9]]
    assert corpus_bleu(refs, refs) == pytest.approx(1.0, abs=1e-12)
    assert corpus_bleu([[], []], refs) == 0.0
    with pytest.raises(ContractError):
        corpus_bleu([], [])
    with pytest.raises(ContractError):
        corpus_bleu([[1]], [[1], [2]])


def test_bleu_zero_precision_gives_zero():
    assert corpus_bleu([[1, 2, 3]], [[1, 2, 3, 4]]) == 0.0  # no 4-grams in the hypothesis


def test_bleu_hand_example():
    hyp = [[1, 2, 3, 4, 5, 6]]
    ref = [[1, 2, 3, 4, 5, 7]]
    # precisions 5/6, 4/5, 3/4, 2/3; equal lengths so no brevity penalty
    want = math.exp((math.log(5 / 6) + math.log(4 / 5) + math.log(3 / 4) + math.log(2 / 3)) / 4)
    assert corpus_bleu(hyp, ref) == pytest.approx(want, abs=1e-12)


def test_brevity_penalty():
    ref = [[1, 2, 3, 4, 5, 6, 7, 8]]
    hyp = [[1, 2, 3, 4, 5, 6]]
    # all hypothesis n-grams match; only the penalty exp(1 - 8/6) remains
    assert corpus_bleu(hyp, ref) == pytest.approx(math.exp(1 - 8 / 6), abs=1e-12)


def test_clipped_counts():
    matches, totals, c, r = bleu_stats([[5, 5, 5, 5]], [[5, 5, 6, 7]])
    assert matches[0] == 2 and totals[0] == 4
    assert (c, r) == (4, 4)


def test_bleu_matches_reference_on_random_corpora():
    rng = np.random.default_rng(7)
    scores = []
    for _ in range(20):
        hyps, refs = random_bleu_corpus(rng)
        want = reference_bleu(hyps, refs)
        assert abs(corpus_bleu(hyps, refs) - want) <= 1e-9
        scores.append(want)
    assert sum(s > 0 for s in scores) >= 15
