import csv
from dataclasses import replace

import pytest

from conftest import tiny_config
from prunetune.adaptation import GENERAL
from prunetune.errors import CapacityError, ContractError, FormatError
from prunetune.harness import (
    ALL_STRATEGIES,
    Manifest,
    MetricReport,
    MetricRow,
    build_corpora,
    curve_summary,
    dense_general,
    evaluate,
    extracted_general,
    load_config,
    load_state,
    lowresource_sweep,
    mask_summary,
    order_sweep,
    robustness_curves,
    run_experiment,
    save_config,
    save_state,
    sparsity_sweep,
)
from prunetune.masks import inference_mask


def test_config_round_trip(tmp_path, tiny):
    save_config(tiny, tmp_path / "c.json")
    again = load_config(tmp_path / "c.json")
    assert again == tiny
    assert again.fingerprint() == tiny.fingerprint()
    assert again.fingerprint("model") != again.fingerprint("seed")


def test_config_errors(tmp_path, tiny):
    raw = tiny.to_dict()
    with pytest.raises(ContractError, match="unknown config keys"):
        type(tiny).from_dict({**raw, "colour": 1})
    with pytest.raises(ContractError):
        type(tiny).from_dict({**raw, "model": {"layers": 3}})
    (tmp_path / "bad.json").write_text("{nope")
    with pytest.raises(FormatError):
        load_config(tmp_path / "bad.json")
    with pytest.raises(ContractError):
        tiny_config(strategy="magic")
    with pytest.raises(ContractError):
        tiny_config(domains=[tiny.domains[0], tiny.domains[0]])
    with pytest.raises(ContractError, match="vocab_size"):
        tiny_config(general=replace(tiny.general, vocab_size=20))


def test_build_corpora_subsamples_and_reads_files(tmp_path, tiny):
    cfg = replace(tiny, domains=[replace(tiny.domains[0], train_fraction=0.5)])
    corpora = build_corpora(cfg)
    assert set(corpora) == {GENERAL, "rev"}
    assert len(corpora["rev"]["train"]) == 16
    from prunetune.data import write_corpus

    write_corpus(corpora[GENERAL], tmp_path)
    assert build_corpora(tiny, tmp_path)[GENERAL].splits == corpora[GENERAL].splits


def test_evaluate_rejects_empty_split(tiny):
    corpora = build_corpora(tiny)
    state = dense_general(tiny, corpora)
    with pytest.raises(ContractError):
        evaluate(tiny.model, state.params, [], "test")
    res = evaluate(tiny.model, state.params, corpora[GENERAL], "dev")
    assert set(res) == {"accuracy", "bleu"} and 0 <= res["accuracy"] <= 1


def test_report_round_trip_and_render(tmp_path):
    report = MetricReport("prune-tune", 3, [MetricRow("rev", 0.5, 0.75, 120, {"x": 1})])
    report.save(tmp_path / "r.json")
    again = MetricReport.load(tmp_path / "r.json")
    assert again == report
    assert again.row("rev").target_score == 0.75
    with pytest.raises(KeyError):
        again.row("nope")
    lines = report.render().splitlines()
    assert lines[0] == "strategy=prune-tune seed=3"
    assert lines[-1].split() == ["rev", "50.00", "75.00", "120"]


def test_state_round_trip(tmp_path, tiny):
    corpora = build_corpora(tiny)
    state, _ = extracted_general(tiny, corpora)
    save_state(state, tmp_path / "s")
    again = load_state(tmp_path / "s", tiny.train_config)
    assert again.params.equals(state.params)
    assert again.registry.counts() == state.registry.counts()
    assert again.adam.global_step == state.adam.global_step
    assert again.adam.step == state.adam.step
    assert all((again.adam.m[n] == state.adam.m[n]).all() for n in state.params)
    assert again.history == state.history


def test_manifest_reuses_finished_stages(tmp_path, tiny):
    corpora = build_corpora(tiny)
    first, events = extracted_general(tiny, corpora, tmp_path)
    assert events is not None
    stages = Manifest(tmp_path).stages
    assert set(stages) == {"train_general", "extract"}
    assert (tmp_path / "manifest.json").exists()
    again, events = extracted_general(tiny, corpora, tmp_path)
    assert events is None
    assert again.params.equals(first.params)
    # a changed sparsity keeps the dense stage but redoes extraction
    other, events = extracted_general(replace(tiny, general_sparsity=0.3), corpora, tmp_path)
    assert events is not None
    assert Manifest(tmp_path).stages["train_general"] == stages["train_general"]
    assert Manifest(tmp_path).stages["extract"]["sparsity"] == 0.3


def test_prune_tune_experiment(tmp_path, tiny):
    report = run_experiment(tiny, tmp_path)
    assert [r.domain for r in report.rows] == [GENERAL, "rev", "shf"]
    general = report.row(GENERAL)
    # each domain is adapted separately from the same general sub-network
    for name in ("rev", "shf"):
        assert report.row(name).general_score == general.general_score
        assert report.row(name).tuned_param_count > 0
    assert MetricReport.load(tmp_path / "report.json") == report
    assert (tmp_path / "report.txt").read_text().startswith("strategy=prune-tune")
    assert (tmp_path / "adapted-rev" / "registry.masks").exists()


def test_sequential_experiment_records_stages(tmp_path, tiny):
    report = run_experiment(replace(tiny, strategy="sequential"), tmp_path)
    assert [s["after"] for s in report.stages] == ["rev", "shf"]
    assert set(report.stages[-1]["scores"]) == {GENERAL, "rev", "shf"}
    # earlier domains score the same after later adaptation
    assert report.stages[0]["scores"]["rev"] == report.stages[1]["scores"]["rev"]
    assert report.stages[0]["scores"][GENERAL] == report.row(GENERAL).general_score
    counts = report.meta["final_counts"]
    assert counts["rev"] == report.row("rev").tuned_param_count
    state = load_state(tmp_path / "adapted-sequential", tiny.train_config)
    assert state.registry.domain_names() == [GENERAL, "rev", "shf"]


@pytest.mark.parametrize("strategy", [s for s in ALL_STRATEGIES
                                      if s not in ("prune-tune", "sequential")])
def test_baseline_experiments(tmp_path, tiny, strategy):
    # two layers per side so that layer freeze leaves something frozen
    cfg = replace(tiny, strategy=strategy, domains=tiny.domains[:1],
                  model=replace(tiny.model, num_layers=2))
    report = run_experiment(cfg, tmp_path / "run", cache_dir=tmp_path / "cache")
    row = report.row("rev")
    assert 0 <= row.general_score <= 1 and 0 <= row.target_score <= 1
    full = dense_general(cfg, build_corpora(cfg)).params.size()
    if strategy in ("finetune", "mixed", "ewc", "distill"):
        assert row.tuned_param_count == full
    else:
        assert 0 < row.tuned_param_count < full
    assert (tmp_path / "run" / f"{strategy}-rev.ckpt").exists()
    assert "train_general" in Manifest(tmp_path / "cache").stages


def test_errors_name_the_strategy(tiny):
    cfg = replace(tiny, domains=[replace(tiny.domains[0], budget=0.9)])
    with pytest.raises(CapacityError, match=r"\[prune-tune\]"):
        run_experiment(cfg)


def test_sparsity_sweep_writes_csv(tmp_path, tiny):
    cfg = replace(tiny, domains=tiny.domains[:1])
    reports = sparsity_sweep(cfg, [0.3, 0.5], tmp_path)
    assert [r.meta["general_sparsity"] for r in reports] == [0.3, 0.5]
    rows = list(csv.reader(open(tmp_path / "sparsity.csv")))
    assert rows[0][:2] == ["sparsity", "domain"]
    assert len(rows) == 1 + 2 * 2
    # both runs share one dense general model
    assert len(list((tmp_path / "cache").glob("dense-*"))) == 1
    assert len(list((tmp_path / "cache").glob("general-*"))) == 2


def test_lowresource_sweep(tmp_path, tiny):
    reports = lowresource_sweep(tiny, [0.5, 1.0], tmp_path)
    assert [(r.meta["fraction"], r.strategy) for r in reports] == [
        (0.5, "prune-tune"), (0.5, "finetune"), (1.0, "prune-tune"), (1.0, "finetune")]
    rows = list(csv.reader(open(tmp_path / "lowresource.csv")))
    assert len(rows) == 5
    with pytest.raises(ContractError):
        lowresource_sweep(tiny, [0.0])
    with pytest.raises(ContractError):
        lowresource_sweep(replace(tiny, domains=[]), [0.5])


def test_order_sweep(tiny):
    reports = order_sweep(tiny)
    assert [r.meta["order"] for r in reports] == [["rev", "shf"], ["shf", "rev"]]
    assert all(r.strategy == "sequential" for r in reports)


def test_robustness_curves_and_summary(tiny):
    corpora = build_corpora(tiny)
    dense = dense_general(tiny, corpora)
    general, _ = extracted_general(tiny, corpora, dense=dense)
    curves = robustness_curves(tiny, dense, general, corpora, every=5, horizon_factor=2,
                               max_steps=20)
    ft, pt = curves["finetune"], curves["prune-tune"]
    assert [s for s, _ in ft] == list(range(5, curves["horizon"] + 1, 5))
    assert [s for s, _ in pt] == [s for s, _ in ft]
    best = curve_summary(ft)["peak_step"]
    assert curves["horizon"] >= min(2 * best, 20)
    summary = curve_summary([(10, 0.2), (20, 0.5), (30, 0.4)])
    assert summary == {"peak": 0.5, "peak_step": 20, "final": 0.4}
    with pytest.raises(ContractError):
        robustness_curves(tiny, dense, general, corpora, every=0)


def test_mask_summary(tiny):
    corpora = build_corpora(tiny)
    state, _ = extracted_general(tiny, corpora)
    text = mask_summary(state.registry)
    lines = text.splitlines()
    assert lines[0].split() == ["owner", "elements", "share"]
    owners = {line.split()[0]: int(line.split()[1]) for line in lines[1:] if line.strip()
              and not line.startswith("tensor") and line.split()[0] in state.registry.counts()}
    assert owners == state.registry.counts()
    assert "embed" in text


def test_adapted_general_mask_matches_extraction(tmp_path, tiny):
    corpora = build_corpora(tiny)
    base, _ = extracted_general(tiny, corpora, tmp_path)
    run_experiment(tiny, tmp_path)
    state = load_state(tmp_path / "adapted-rev", tiny.train_config)
    mask = inference_mask(state.registry, GENERAL)
    assert mask.apply(state.params).equals(inference_mask(base.registry, GENERAL).apply(base.params))
