import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from prunetune.data import SyntheticDomainSpec, gen_synthetic_domain
from prunetune.errors import CapacityError, ContractError
from prunetune.estimator import PruneTuneTranslator, check_parallel, check_token_sequences

SMALL = dict(num_layers=1, model_dim=16, ffn_dim=32, heads=2, vocab_size=12, max_len=10,
             general_steps=30, prune_steps=20, warmup_steps=3, tune_steps=10, batch_size=8,
             lr_warmup=10, peak_lr=5e-3)


def _xy(kind, seed, n=40):
    corpus = gen_synthetic_domain(SyntheticDomainSpec(kind, kind, vocab_size=9, min_len=2,
                                                      max_len=5, sizes=(n, 0, 0), seed=seed))
    return [s for s, _ in corpus["train"]], [t for _, t in corpus["train"]]


def test_check_token_sequences():
    assert check_token_sequences([(1, 2), np.array([3])], 5) == [[1, 2], [3]]
    for bad in ("abc", 3, [], [[]], [[1.5]], [[True]], [[5]], [[-1]]):
        with pytest.raises(ContractError):
            check_token_sequences(bad, 5)
    with pytest.raises(ContractError, match="limit"):
        check_token_sequences([[1, 2, 3]], 5, max_len=2)


def test_check_parallel():
    assert check_parallel([[1]], [[2, 3]], 5) == [([1], [2, 3])]
    with pytest.raises(ContractError, match="has 2"):
        check_parallel([[1], [2]], [[1]], 5)


def test_params_and_clone():
    est = PruneTuneTranslator(**SMALL)
    params = est.get_params()
    assert params["general_steps"] == 30 and params["random_state"] == 0
    twin = clone(est)
    assert twin.get_params() == params
    assert est.set_params(budget=0.2).budget == 0.2


def test_unfitted_raises():
    est = PruneTuneTranslator(**SMALL)
    with pytest.raises(NotFittedError):
        est.predict([[1, 2]])
    with pytest.raises(NotFittedError):
        est.partial_fit([[1]], [[1]], domain="d")


@pytest.fixture(scope="module")
def fitted():
    return PruneTuneTranslator(**SMALL).fit(*_xy("copy", 1))


def test_fit_predict_score(fitted):
    X, y = _xy("copy", 1)
    preds = fitted.predict(X[:5])
    assert len(preds) == 5
    assert all(0 <= t < 9 for p in preds for t in p)
    assert 0.0 <= fitted.score(X, y) <= 1.0
    counts = fitted.tuned_param_counts()
    assert counts["general"] > 0 and counts["free"] > 0
    assert fitted.domains_ == ["general"]


def test_fit_is_deterministic(fitted):
    X, _ = _xy("copy", 1)
    again = clone(fitted).fit(*_xy("copy", 1))
    assert again.state_.params.equals(fitted.state_.params)
    assert again.predict(X) == fitted.predict(X)


def test_partial_fit_keeps_general_outputs(fitted):
    est = clone(fitted).fit(*_xy("copy", 1))
    X, _ = _xy("copy", 1)
    before = est.predict(X)
    est.partial_fit(*_xy("reverse", 2), domain="rev")
    assert est.predict(X) == before
    assert est.domains_ == ["general", "rev"]
    assert est.tuned_param_counts()["rev"] > 0
    assert 0.0 <= est.score(*_xy("reverse", 2), domain="rev") <= 1.0
    with pytest.raises(ContractError):
        est.partial_fit(*_xy("reverse", 2), domain="rev")
    with pytest.raises(CapacityError):
        est.partial_fit(*_xy("shift", 3), domain="shf", budget=0.9)


def test_input_validation(fitted):
    with pytest.raises(ContractError):
        fitted.predict([[9]])  # outside the 9 symbols
    with pytest.raises(ContractError):
        fitted.predict([list(range(9))])  # longer than max_len - 2
    with pytest.raises(ContractError):
        PruneTuneTranslator(**SMALL).fit([[1]], [[1], [2]])


def test_dense_fit_without_pruning():
    est = PruneTuneTranslator(**{**SMALL, "general_sparsity": 0.0, "general_steps": 2})
    est.fit(*_xy("copy", 1))
    assert est.tuned_param_counts()["free"] == 0


def test_beam_prediction(fitted):
    est = clone(fitted).set_params(beam_width=2)
    est.state_, est.domains_ = fitted.state_, fitted.domains_
    X, _ = _xy("copy", 1)
    preds = est.predict(X[:3])
    assert len(preds) == 3
