"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The lines are printed together at the end of the pytest run (see the
terminal summary hook in ``conftest.py``). Every test asserts the same
condition it reports, so a FAIL line always comes with a failing test.
"""

import time
from dataclasses import replace

import numpy as np
import pytest

from prunetune.adaptation import GENERAL, DomainSpec, prune_tune, sequential_adapt
from prunetune.baselines import (
    DistillState,
    EwcState,
    distill_finetune,
    distill_objective,
    ewc_finetune,
    ewc_penalty_builder,
    full_finetune,
    layer_freeze_tune,
)
from prunetune.data import SyntheticDomainSpec, encode_pairs, gen_synthetic_domain
from prunetune.decoding import greedy_decode
from prunetune.harness import (
    PRUNE_TUNE,
    TargetDomain,
    build_corpora,
    curve_summary,
    domain_spec,
    evaluate,
    extracted_general,
    robustness_curves,
)
from prunetune.masks import inference_mask
from prunetune.metrics import corpus_bleu
from prunetune.model import (
    AdapterConfig,
    attach_adapters,
    init_params,
    loss_builder,
    transformer_forward,
)
from prunetune.pruning import PruneSchedule, magnitude_prune_layer, sparsity_at
from prunetune.tensor import grad_check
from prunetune.training import make_batch

from partition_ops import run_case
from reference import brute_force_prune, random_bleu_corpus, reference_bleu


def verdict(record_property, number, ok, detail):
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} ({detail})"
    record_property("acceptance", line)
    print(line)
    assert ok, line


def _decode(config, params, corpus, mask, split="test"):
    return greedy_decode(config.model, params, [s for s, _ in encode_pairs(corpus[split])], mask)


# -- 1. zero forgetting -----------------------------------------------------------


def _sequential_domains():
    common = dict(vocab_size=40, sizes=(300, 0, 100))
    return [
        gen_synthetic_domain(SyntheticDomainSpec("ted", "reverse", seed=2, **common)),
        gen_synthetic_domain(SyntheticDomainSpec("bio", "cipher", seed=4, key=3, **common)),
        gen_synthetic_domain(SyntheticDomainSpec("novel", "shift", seed=5, shift=7, **common)),
    ]


def test_criterion_1_zero_forgetting(general_run, record_property):
    config, corpora, _, extracted = general_run
    start = time.process_time()
    state = extracted.copy()
    domains = _sequential_domains()
    probe = make_batch(encode_pairs(corpora[GENERAL]["test"][:32]))

    def logits(st, name):
        return transformer_forward(config.model, st.params, probe["src"], probe["tgt_in"],
                                   inference_mask(st.registry, name))

    general_before = _decode(config, state.params, corpora[GENERAL],
                             inference_mask(state.registry, GENERAL))
    general_logits = logits(state, GENERAL)
    snapshots = {}

    def done(st, spec):
        mask = inference_mask(st.registry, spec.name)
        snapshots[spec.name] = (_decode(config, st.params, spec.corpus, mask),
                                logits(st, spec.name))

    specs = [DomainSpec(c.name, c, 0.1, 50, 150) for c in domains]
    sequential_adapt(state, specs, on_domain_done=done)
    state.registry.check_invariants()

    same = []
    for c in domains:
        mask = inference_mask(state.registry, c.name)
        decoded, before = snapshots[c.name]
        same.append(_decode(config, state.params, c, mask) == decoded)
        same.append(np.array_equal(logits(state, c.name), before))
    same.append(_decode(config, state.params, corpora[GENERAL],
                        inference_mask(state.registry, GENERAL)) == general_before)
    same.append(np.array_equal(logits(state, GENERAL), general_logits))
    shares = {k: v / state.registry.total() for k, v in state.registry.counts().items()}
    elapsed = time.process_time() - start
    ok = all(same) and elapsed < 300
    verdict(record_property, 1, ok,
            f"{sum(same)}/{len(same)} decode and logit checks identical, "
            f"free share {shares['free']:.3f}, {elapsed:.0f}s CPU")


# -- 2. partition invariants ------------------------------------------------------


def test_criterion_2_partition_invariants(tmp_path, record_property):
    start = time.process_time()
    ops = sum(run_case(seed, tmp_path) for seed in range(1000))
    elapsed = time.process_time() - start
    ok = elapsed < 60
    verdict(record_property, 2, ok, f"1000 cases, {ops} operations with save/load round "
            f"trips, {elapsed:.1f}s CPU")


# -- 3. gradients -----------------------------------------------------------------


def test_criterion_3_gradients(general_run, record_property):
    config, corpora, dense, _ = general_run
    start = time.process_time()
    batch = make_batch(encode_pairs(corpora["ted"]["train"][:4]))
    build = loss_builder(config.model)
    # the toy model at init with randomized adapters (every code path) and the
    # trained dense model; key biases cancel inside the softmax (exact zero
    # gradient) and stencils straddling a ReLU kink are redrawn
    rng = np.random.default_rng(0)
    fresh = attach_adapters(init_params(config.model, 0), config.model, AdapterConfig(8), 0)
    for n in fresh:
        if ".adapter.up." in n:
            fresh[n] = 0.1 * rng.standard_normal(fresh[n].shape)
    model_errs, skipped = {}, 0
    for label, params in (("init+adapters", fresh), ("trained", dense.params)):
        details = {}
        names = [n for n in params if not n.endswith(".k.b")]
        model_errs[label] = grad_check(build, params, batch, probe_count=200, step_size=1e-4,
                                       stencil=4, names=names, seed=0, skip_kinks=True,
                                       details=details)
        skipped += details["skipped"]

    params = dense.params
    fisher = {n: rng.random(p.shape) for n, p in params.items()}
    moved = params.copy()
    for n in moved:
        moved[n] = moved[n] + 0.1 * rng.standard_normal(moved[n].shape)
    # exactly quadratic, so a wide stencil has no truncation error
    ewc = grad_check(ewc_penalty_builder(EwcState(params, fisher, 1.0)), moved, {},
                     probe_count=200, step_size=1e-2, stencil=4, seed=0)

    logits = {"logits": rng.standard_normal((24, config.model.vocab_size))}
    teacher = rng.dirichlet(np.ones(config.model.vocab_size), size=24)
    targets = rng.integers(3, config.model.vocab_size, size=24)
    targets[-3:] = 0

    def distill_build(g, inputs):
        return {"loss": distill_objective(g, g.param("logits"), targets, teacher, 0.5)[0]}

    distill = grad_check(distill_build, logits, {}, probe_count=200, step_size=1e-3, stencil=4,
                         seed=0)
    elapsed = time.process_time() - start
    worst = max(model_errs.values())
    ok = worst < 1e-4 and ewc < 1e-6 and distill < 1e-6 and elapsed < 120
    verdict(record_property, 3, ok,
            ", ".join(f"model {k} {v:.1e}" for k, v in model_errs.items())
            + f" ({skipped} kinked probes redrawn), EWC penalty {ewc:.1e}, "
            f"distillation {distill:.1e}, {elapsed:.0f}s CPU")


# -- 4. pruning keeps general accuracy ------------------------------------------------


def test_criterion_4_sparsity_degradation(general_run, record_property):
    config, corpora, dense, half = general_run
    start = time.process_time()
    tenth, _ = extracted_general(replace(config, general_sparsity=0.9), corpora, dense=dense)
    test = corpora[GENERAL]

    def score(state, mask=None):
        return evaluate(config.model, state.params, test, "test", mask)["accuracy"]

    dense_acc = score(dense)
    half_acc = score(half, inference_mask(half.registry, GENERAL))
    tenth_acc = score(tenth, inference_mask(tenth.registry, GENERAL))
    drop_half, drop_tenth = dense_acc - half_acc, dense_acc - tenth_acc
    elapsed = time.process_time() - start
    ok = drop_half <= 0.02 and drop_tenth > drop_half
    verdict(record_property, 4, ok,
            f"dense {100 * dense_acc:.2f}, 50% {100 * half_acc:.2f}, "
            f"90% {100 * tenth_acc:.2f} token accuracy; {elapsed:.0f}s CPU plus shared general run")


# -- 5. forgetting vs Prune-Tune ------------------------------------------------------


def test_criterion_5_forgetting_direction(general_run, record_property):
    config, corpora, dense, extracted = general_run
    start = time.process_time()
    target = config.domains[0]
    general, ted = corpora[GENERAL], corpora[target.name]

    def score(params, corpus, mask=None):
        return evaluate(config.model, params, corpus, "test", mask)["accuracy"]

    general_mask = inference_mask(extracted.registry, GENERAL)
    dense_general_acc = score(dense.params, general)
    base_general_acc = score(extracted.params, general, general_mask)
    base_target_acc = score(extracted.params, ted, general_mask)

    tuned = full_finetune(dense, ted, config.tune_steps)
    ft_drop = dense_general_acc - score(tuned, general)

    state = prune_tune(extracted.copy(), domain_spec(config, target, ted))
    pt_drop = base_general_acc - score(state.params, general,
                                       inference_mask(state.registry, GENERAL))
    pt_target = score(state.params, ted, inference_mask(state.registry, target.name))
    elapsed = time.process_time() - start
    ok = ft_drop >= 0.05 and pt_drop == 0.0 and pt_target >= base_target_acc + 0.10
    verdict(record_property, 5, ok,
            f"fine-tune general drop {100 * ft_drop:.2f}, Prune-Tune general drop "
            f"{100 * pt_drop:.2f}, Prune-Tune target {100 * pt_target:.2f} vs general model "
            f"{100 * base_target_acc:.2f}; {elapsed:.0f}s CPU")


# -- 6. robustness over long tuning ---------------------------------------------------


# few training sentences so fine-tuning overfits early; a large dev set so
# score changes reflect the model rather than which sentences were sampled;
# the slice is sized to the 100 sentences, since 10% of the weights memorizes them
ROBUST_TARGET = TargetDomain(SyntheticDomainSpec("ted", "reverse", sizes=(100, 1600, 200),
                                                 seed=2, key=3), budget=0.02)


@pytest.mark.slow
def test_criterion_6_robustness(general_run, record_property):
    config, _, dense, extracted = general_run
    start = time.process_time()
    cfg = replace(config, domains=[ROBUST_TARGET])
    corpora = build_corpora(cfg)
    curves = robustness_curves(cfg, dense, extracted, corpora, every=200, horizon_factor=3,
                               max_steps=12000)
    ft, pt = curve_summary(curves["finetune"]), curve_summary(curves[PRUNE_TUNE])
    horizon = curves["horizon"]
    elapsed = time.process_time() - start
    reached = horizon >= 3 * ft["peak_step"]
    ok = reached and ft["final"] < ft["peak"] and pt["peak"] - pt["final"] <= 0.01
    verdict(record_property, 6, ok,
            f"horizon {horizon} steps; fine-tune peak {100 * ft['peak']:.2f} at "
            f"{ft['peak_step']}, final {100 * ft['final']:.2f}; Prune-Tune peak "
            f"{100 * pt['peak']:.2f} at {pt['peak_step']}, final {100 * pt['final']:.2f}; "
            f"{elapsed:.0f}s CPU")


# -- 7. schedule and pruning oracles ----------------------------------------------------


def test_criterion_7_unit_oracles(record_property):
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(200):
        s_i = float(rng.uniform(0, 0.5))
        s_f = float(rng.uniform(s_i, 1))
        t0, dt, n = (int(v) for v in rng.integers([0, 1, 1], [500, 200, 20]))
        schedule = PruneSchedule(s_i, s_f, t0, dt, n)
        span = n * dt
        points = [0, t0, t0 + span // 2, t0 + span, t0 + span + 7]
        points += [int(t) for t in rng.integers(0, t0 + span + 10, size=10)]
        for t in points:
            frac = min(max((t - t0) / span, 0.0), 1.0)
            want = s_f + (s_i - s_f) * (1.0 - frac) ** 3
            worst = max(worst, abs(sparsity_at(schedule, t) - want))
    mismatches, ties = 0, 0
    for _ in range(1200):
        shape = tuple(int(d) for d in rng.integers(1, 9, size=int(rng.integers(1, 3))))
        values = rng.integers(-4, 5, size=shape) * 0.5
        eligible = rng.random(shape) < 0.85
        target = float(rng.random())
        ties += len(np.unique(np.abs(values[eligible]))) < int(eligible.sum())
        got = magnitude_prune_layer(values, eligible, target)
        mismatches += not np.array_equal(got, brute_force_prune(values, eligible, target))
    ok = worst <= 1e-12 and mismatches == 0 and ties > 0
    verdict(record_property, 7, ok, f"schedule max error {worst:.1e}; 1200 tensors "
            f"({ties} with tied magnitudes), {mismatches} mismatches")


# -- 8. BLEU ----------------------------------------------------------------------


def test_criterion_8_bleu_oracle(record_property):
    rng = np.random.default_rng(7)
    worst, nonzero = 0.0, 0
    for _ in range(20):
        hyps, refs = random_bleu_corpus(rng)
        want = reference_bleu(hyps, refs)
        worst = max(worst, abs(corpus_bleu(hyps, refs) - want))
        nonzero += want > 0
    ok = worst <= 1e-9 and nonzero >= 15
    verdict(record_property, 8, ok, f"20 corpora ({nonzero} nonzero), max error {worst:.1e}")


# -- 9. baseline reductions ---------------------------------------------------------


def test_criterion_9_baseline_reductions(general_run, record_property):
    config, corpora, dense, _ = general_run
    ted = corpora[config.domains[0].name]
    steps, every = 60, 20

    def trajectory(run):
        points = []
        final = run(lambda step, params: points.append(params.copy()))
        return points + [final]

    reference = trajectory(lambda cb: full_finetune(dense, ted, steps, cb, every))
    fisher = {n: np.ones_like(p) for n, p in dense.params.items()}
    runs = {
        "EWC lambda=0": lambda cb: ewc_finetune(dense, EwcState(dense.params, fisher, 0.0),
                                                ted, steps, cb, every),
        "distill alpha=0": lambda cb: distill_finetune(dense, DistillState(dense.params, 0.0),
                                                       ted, steps, cb, every),
        "layer freeze all layers": lambda cb: layer_freeze_tune(
            dense, ted, steps, config.model.num_layers, cb, every),
    }
    exact = {}
    for name, run in runs.items():
        points = trajectory(run)
        exact[name] = len(points) == len(reference) and all(
            a.equals(b) for a, b in zip(points, reference))
    ok = all(exact.values())
    verdict(record_property, 9, ok, ", ".join(f"{k}: {'bit-exact' if v else 'differs'}"
                                              for k, v in exact.items())
            + f" over {len(reference)} checkpoints")
