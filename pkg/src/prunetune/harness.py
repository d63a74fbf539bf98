"""Experiment orchestration: configs, evaluation, reports, sweeps, resume.

An experiment trains a dense general model, extracts its informative
sub-network, then adapts to one or more synthetic target domains with a
chosen strategy. Every stage writes its artifacts under ``out_dir`` and is
recorded in ``manifest.json``, so later runs with the same configuration
pick up finished stages instead of recomputing them.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .adaptation import (
    GENERAL,
    DomainSpec,
    PipelineState,
    domain_trainer,
    extract_general_subnet,
    generate_lottery_subnet,
    prune_tune,
    sequential_adapt,
    train_general,
)
from .baselines import (
    STRATEGIES,
    DistillState,
    EwcState,
    adapter_tune,
    distill_finetune,
    estimate_fisher,
    ewc_finetune,
    finetune_trainer,
    full_finetune,
    layer_freeze_tune,
    top_layer_mask,
)
from .data import (
    SPECIALS,
    ParallelCorpus,
    SyntheticDomainSpec,
    encode_pairs,
    gen_synthetic_domain,
    read_corpus,
)
from .decoding import greedy_decode, translate
from .errors import ContractError, FormatError, PruneTuneError
from .masks import inference_mask, load_masks, save_masks
from .metrics import corpus_bleu, token_accuracy
from .model import AdapterConfig, ModelConfig, attach_adapters
from .optim import AdamState, LRSchedule
from .params import load_checkpoint, load_model, save_checkpoint, save_model
from .pruning import PruneSchedule, write_events
from .training import TrainConfig

log = logging.getLogger(__name__)

PRUNE_TUNE = "prune-tune"
SEQUENTIAL = "sequential"
MIXED = "mixed"
ALL_STRATEGIES = (PRUNE_TUNE, SEQUENTIAL, MIXED) + STRATEGIES
MANIFEST = "manifest.json"


# -- configuration --------------------------------------------------------------


@dataclass
class TargetDomain:
    """A target domain: corpus recipe, budget, ancestors and data fraction."""

    data: SyntheticDomainSpec
    budget: float = 0.1
    ancestors: tuple = (GENERAL,)
    train_fraction: float = 1.0

    @property
    def name(self):
        return self.data.name


def _default_general():
    return SyntheticDomainSpec("general", "copy", sizes=(3000, 200, 200), seed=1)


def _default_domains():
    return [TargetDomain(SyntheticDomainSpec("ted", "reverse", sizes=(300, 200, 200), seed=2))]


@dataclass
class ExperimentConfig:
    """Everything needed to reproduce one experiment; JSON round-trippable."""

    model: ModelConfig = field(default_factory=ModelConfig)
    general: SyntheticDomainSpec = field(default_factory=_default_general)
    domains: list = field(default_factory=_default_domains)
    strategy: str = PRUNE_TUNE
    seed: int = 0
    batch_size: int = 32
    peak_lr: float = 2e-3
    lr_warmup: int = 400
    label_smoothing: float = 0.0
    clip_norm: float = 0.0
    general_steps: int = 1200
    general_sparsity: float = 0.5
    prune_steps: int = 800
    prune_interval: int = 100
    prune_kind: str = "cubic"
    multi_domain: bool = False
    warmup_steps: int = 200
    tune_steps: int = 600
    ewc_strength: float = 1.0
    fisher_batches: int = 50
    distill_alpha: float = 0.5
    adapter_dim: int = 8
    freeze_top_layers: int = 1
    beam_width: int = 1
    length_penalty: float = 0.6
    eval_split: str = "test"

    def __post_init__(self):
        if self.strategy not in ALL_STRATEGIES:
            raise ContractError(f"unknown strategy {self.strategy!r}; pick one of {ALL_STRATEGIES}")
        names = [GENERAL] + [d.name for d in self.domains]
        if len(set(names)) != len(names):
            raise ContractError(f"domain names must be unique and not {GENERAL!r}: {names}")
        for spec in [self.general] + [d.data for d in self.domains]:
            if spec.vocab_size + len(SPECIALS) > self.model.vocab_size:
                raise ContractError(f"domain {spec.name!r} needs vocab_size >= "
                                    f"{spec.vocab_size + len(SPECIALS)}")
            if spec.max_len + 1 >= self.model.max_len:
                raise ContractError(f"domain {spec.name!r} sentences exceed model max_len")

    @property
    def train_config(self) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size,
            schedule=LRSchedule(peak=self.peak_lr, warmup=self.lr_warmup),
            label_smoothing=self.label_smoothing,
            clip_norm=self.clip_norm,
            seed=self.seed,
        )

    def to_dict(self) -> dict:
        out = asdict(self)
        out["general"] = self.general.to_dict()
        out["domains"] = [
            {"data": d.data.to_dict(), "budget": d.budget, "ancestors": list(d.ancestors),
             "train_fraction": d.train_fraction}
            for d in self.domains
        ]
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        raw = dict(raw)
        unknown = set(raw) - {f.name for f in fields(cls)}
        if unknown:
            raise ContractError(f"unknown config keys {sorted(unknown)}")
        try:
            if "model" in raw:
                raw["model"] = ModelConfig(**raw["model"])
            if "general" in raw:
                raw["general"] = _domain_spec(raw["general"])
            if "domains" in raw:
                raw["domains"] = [
                    TargetDomain(_domain_spec(d["data"]), d.get("budget", 0.1),
                                 tuple(d.get("ancestors", (GENERAL,))),
                                 d.get("train_fraction", 1.0))
                    for d in raw["domains"]
                ]
            return cls(**raw)
        except (TypeError, KeyError) as exc:
            raise ContractError(f"malformed config: {exc}") from None

    def fingerprint(self, *keys) -> str:
        """Hash of the listed fields (all fields when none are given)."""
        d = self.to_dict()
        if keys:
            d = {k: d[k] for k in keys}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def _domain_spec(raw) -> SyntheticDomainSpec:
    raw = dict(raw)
    raw["sizes"] = tuple(raw.get("sizes", (2000, 200, 200)))
    return SyntheticDomainSpec(**raw)


def load_config(path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON: {exc}") from None
    return ExperimentConfig.from_dict(raw)


def save_config(config: ExperimentConfig, path) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2) + "\n", encoding="utf-8")


# Fields that determine the dense general model and the extracted sub-network.
_GENERAL_KEYS = ("model", "general", "seed", "batch_size", "peak_lr", "lr_warmup",
                 "label_smoothing", "clip_norm", "general_steps", "multi_domain")
_EXTRACT_KEYS = _GENERAL_KEYS + ("general_sparsity", "prune_steps", "prune_interval",
                                 "prune_kind")


# -- corpora and evaluation ---------------------------------------------------------


def build_corpora(config: ExperimentConfig, data_dir=None) -> dict[str, ParallelCorpus]:
    """General and target corpora, with target train splits subsampled if asked.

    Corpora are read from ``data_dir`` when it holds files for a domain
    (see :func:`~prunetune.data.write_corpus`) and generated otherwise.
    """

    def load(spec):
        if data_dir is not None and (Path(data_dir) / f"{spec.name}.train.src").exists():
            return read_corpus(spec.name, data_dir)
        return gen_synthetic_domain(spec)

    corpora = {GENERAL: load(config.general)}
    for d in config.domains:
        corpus = load(d.data)
        if d.train_fraction < 1.0:
            corpus = corpus.subsample(d.train_fraction, seed=config.seed)
        corpora[d.name] = corpus
    corpora[GENERAL].name = GENERAL
    return corpora


def evaluate(model_config: ModelConfig, params, corpus, split="test", mask=None,
             beam_width=1, length_penalty=0.6) -> dict:
    """Token accuracy and BLEU of decoded ``split`` against its references."""
    pairs = encode_pairs(corpus[split] if isinstance(corpus, ParallelCorpus) else corpus)
    if not pairs:
        raise ContractError(f"split {split!r} is empty")
    srcs = [s for s, _ in pairs]
    refs = [t for _, t in pairs]
    if beam_width == 1:
        hyps = greedy_decode(model_config, params, srcs, mask)
    else:
        hyps = [translate(model_config, params, mask, s, beam_width, length_penalty) for s in srcs]
    return {"accuracy": token_accuracy(hyps, refs), "bleu": corpus_bleu(hyps, refs)}


# -- reports ------------------------------------------------------------------------


@dataclass
class MetricRow:
    """One domain's scores. Scores are token accuracies in [0, 1]."""

    domain: str
    general_score: float
    target_score: float
    tuned_param_count: int
    extra: dict = field(default_factory=dict)


@dataclass
class MetricReport:
    strategy: str
    seed: int
    rows: list = field(default_factory=list)
    stages: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def row(self, domain) -> MetricRow:
        for r in self.rows:
            if r.domain == domain:
                return r
        raise KeyError(domain)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw) -> "MetricReport":
        rows = [MetricRow(**r) for r in raw.get("rows", [])]
        return cls(raw["strategy"], raw["seed"], rows, raw.get("stages", []), raw.get("meta", {}))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "MetricReport":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def render(self) -> str:
        """Plain-text table, one line per domain."""
        head = f"{'domain':<12} {'general':>8} {'target':>8} {'#tuned':>9}"
        lines = [f"strategy={self.strategy} seed={self.seed}", head, "-" * len(head)]
        for r in self.rows:
            lines.append(f"{r.domain:<12} {100 * r.general_score:>8.2f} "
                         f"{100 * r.target_score:>8.2f} {r.tuned_param_count:>9d}")
        return "\n".join(lines)


# -- pipeline state on disk -----------------------------------------------------


def save_state(state: PipelineState, directory) -> dict:
    """Write params, masks and Adam state; return the file paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {
        "checkpoint": directory / "model.ckpt",
        "masks": directory / "registry.masks",
        "adam": directory / "adam.ckpt",
    }
    save_model(paths["checkpoint"], state.config, state.params)
    save_masks(state.registry, paths["masks"])
    adam = state.adam
    tensors = {f"m/{n}": a for n, a in adam.m.items()}
    tensors.update({f"v/{n}": a for n, a in adam.v.items()})
    save_checkpoint(paths["adam"], tensors)
    meta = {"step": adam.step, "clock": adam.clock, "beta1": adam.beta1,
            "beta2": adam.beta2, "eps": adam.eps, "schedule": asdict(adam.schedule),
            "history": state.history}
    (directory / "adam.json").write_text(json.dumps(meta, indent=2))
    return {k: str(v) for k, v in paths.items()}


def load_state(directory, train_config: TrainConfig) -> PipelineState:
    directory = Path(directory)
    config, params = load_model(directory / "model.ckpt")
    registry = load_masks(directory / "registry.masks")
    raw = load_checkpoint(directory / "adam.ckpt")
    meta = json.loads((directory / "adam.json").read_text())
    adam = AdamState(
        m={n: raw[f"m/{n}"] for n in params},
        v={n: raw[f"v/{n}"] for n in params},
        step=meta["step"],
        clock=meta["clock"],
        schedule=LRSchedule(**meta["schedule"]),
        beta1=meta["beta1"],
        beta2=meta["beta2"],
        eps=meta["eps"],
    )
    return PipelineState(config, params, registry, adam, train_config, meta["history"])


class Manifest:
    """``manifest.json``: finished stages keyed by name, with fingerprints."""

    def __init__(self, out_dir):
        self.out_dir = Path(out_dir)
        self.path = self.out_dir / MANIFEST
        self.stages = {}
        if self.path.exists():
            self.stages = json.loads(self.path.read_text()).get("stages", {})

    def lookup(self, stage, fingerprint):
        entry = self.stages.get(stage)
        if entry and entry.get("fingerprint") == fingerprint and Path(entry["dir"]).exists():
            return entry
        return None

    def record(self, stage, fingerprint, directory, **info):
        # merge with entries written by other Manifest objects since we loaded
        if self.path.exists():
            self.stages = {**json.loads(self.path.read_text()).get("stages", {}), **self.stages}
        self.stages[stage] = {"fingerprint": fingerprint, "dir": str(directory), **info}
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.path.write_text(json.dumps({"stages": self.stages}, indent=2) + "\n")


def dense_general(config: ExperimentConfig, corpora, out_dir=None) -> PipelineState:
    """Train (or reload) the dense general model."""
    fp = config.fingerprint(*_GENERAL_KEYS)
    manifest = Manifest(out_dir) if out_dir is not None else None
    if manifest is not None and (hit := manifest.lookup("train_general", fp)):
        log.info("reusing dense general model from %s", hit["dir"])
        return load_state(hit["dir"], config.train_config)
    state = train_general(config.model, corpora[GENERAL], config.general_steps,
                          seed=config.seed, train_config=config.train_config,
                          multi_domain=config.multi_domain)
    if manifest is not None:
        directory = Path(out_dir) / f"dense-{fp}"
        paths = save_state(state, directory)
        manifest.record("train_general", fp, directory, seed=config.seed, **paths)
    return state


def prune_schedule(config: ExperimentConfig) -> PruneSchedule:
    if config.prune_kind == "oneshot":
        return PruneSchedule(0.0, config.general_sparsity, 0, config.prune_interval, 1, "oneshot")
    return PruneSchedule.spanning(config.prune_steps, config.general_sparsity,
                                  interval=config.prune_interval, kind=config.prune_kind)


def extracted_general(config: ExperimentConfig, corpora, out_dir=None, dense=None):
    """Extract (or reload) the informative general sub-network.

    Returns ``(state, events)``; ``events`` is None when reloaded.
    """
    fp = config.fingerprint(*_EXTRACT_KEYS)
    manifest = Manifest(out_dir) if out_dir is not None else None
    if manifest is not None and (hit := manifest.lookup("extract", fp)):
        log.info("reusing general sub-network from %s", hit["dir"])
        return load_state(hit["dir"], config.train_config), None
    if dense is None:
        dense = dense_general(config, corpora, out_dir)
    state, events = extract_general_subnet(dense.copy(), config.general_sparsity,
                                           corpora[GENERAL], schedule=prune_schedule(config),
                                           steps=config.prune_steps)
    if manifest is not None:
        directory = Path(out_dir) / f"general-{fp}"
        paths = save_state(state, directory)
        write_events(events, directory / "prune_log.jsonl")
        manifest.record("extract", fp, directory, seed=config.seed,
                        sparsity=config.general_sparsity, prune_log=str(directory / "prune_log.jsonl"),
                        **paths)
    return state, events


# -- strategies -------------------------------------------------------------------


def domain_spec(config: ExperimentConfig, target: TargetDomain, corpus) -> DomainSpec:
    return DomainSpec(target.name, corpus, target.budget, config.warmup_steps,
                      config.tune_steps, target.ancestors)


def _scores(config, params, corpora, domain, mask=None, general_mask=None):
    kw = dict(split=config.eval_split, beam_width=config.beam_width,
              length_penalty=config.length_penalty)
    general = evaluate(config.model, params, corpora[GENERAL], mask=general_mask, **kw)
    target = evaluate(config.model, params, corpora[domain], mask=mask, **kw)
    return general, target


def _row(domain, general, target, tuned, **extra) -> MetricRow:
    return MetricRow(domain, general["accuracy"], target["accuracy"], int(tuned),
                     {"general_bleu": general["bleu"], "target_bleu": target["bleu"], **extra})


def _general_row(config, state, corpora, mask=None) -> MetricRow:
    kw = dict(split=config.eval_split, beam_width=config.beam_width,
              length_penalty=config.length_penalty)
    general = evaluate(config.model, state.params, corpora[GENERAL], mask=mask, **kw)
    owned = state.registry.counts().get(GENERAL, state.params.size())
    extra = {}
    for d in config.domains:
        before = evaluate(config.model, state.params, corpora[d.name], mask=mask, **kw)
        extra[f"{d.name}_score_before"] = before["accuracy"]
    return _row(GENERAL, general, general, owned, **extra)


def run_baseline(config: ExperimentConfig, dense: PipelineState, corpora, target: TargetDomain):
    """Adapt the dense model to ``target`` with a baseline strategy.

    Returns ``(params, tuned_param_count)``.
    """
    corpus = corpora[target.name]
    steps = config.tune_steps
    s = config.strategy
    if s == "finetune":
        return full_finetune(dense, corpus, steps), dense.params.size()
    if s == MIXED:
        mixed = ParallelCorpus(MIXED, {"train": corpora[GENERAL]["train"] + corpus["train"]})
        return full_finetune(dense, mixed, steps), dense.params.size()
    if s == "layer-freeze":
        mask = top_layer_mask(config.model, dense.params, config.freeze_top_layers)
        tuned = dense.params.size() if mask is None else mask.popcount()
        return layer_freeze_tune(dense, corpus, steps, config.freeze_top_layers), tuned
    if s == "adapter":
        adapter = AdapterConfig(config.adapter_dim)
        state = dense.copy()
        state.params = attach_adapters(state.params, config.model, adapter, config.seed)
        state.adam = state.adam.reset(state.params)
        tuned = sum(p.size for n, p in state.params.items()
                    if state.params.tags[n].group == "adapter")
        return adapter_tune(state, adapter, corpus, steps), tuned
    if s == "ewc":
        fisher = estimate_fisher(dense, corpora[GENERAL], config.fisher_batches, config.seed)
        ewc = EwcState(dense.params.copy(), fisher, config.ewc_strength)
        return ewc_finetune(dense, ewc, corpus, steps), dense.params.size()
    if s == "distill":
        distill = DistillState(dense.params.copy(), config.distill_alpha)
        return distill_finetune(dense, distill, corpus, steps), dense.params.size()
    raise ContractError(f"{s!r} is not a baseline strategy")


def run_experiment(config: ExperimentConfig, out_dir=None, cache_dir=None) -> MetricReport:
    """Run the configured strategy and write its report and artifacts.

    Artifacts (when ``out_dir`` is given): ``manifest.json``, dense and
    general checkpoints with masks and prune log, the adapted state for
    Prune-Tune strategies, ``report.json`` and ``report.txt``. Finished
    general-model stages live in ``cache_dir`` (default ``out_dir``) and are
    reused by later runs with a matching configuration.
    """
    corpora = build_corpora(config)
    report = MetricReport(config.strategy, config.seed,
                          meta={"config": config.to_dict()})
    cache_dir = cache_dir if cache_dir is not None else out_dir
    try:
        if config.strategy in (PRUNE_TUNE, SEQUENTIAL):
            _run_prune_tune(config, corpora, report, out_dir, cache_dir)
        else:
            _run_baselines(config, corpora, report, out_dir, cache_dir)
    except PruneTuneError as exc:
        raise type(exc)(f"[{config.strategy}] {exc}") from exc
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        report.save(out_dir / "report.json")
        (out_dir / "report.txt").write_text(report.render() + "\n", encoding="utf-8")
    return report


def _run_baselines(config, corpora, report, out_dir, cache_dir):
    dense = dense_general(config, corpora, cache_dir)
    report.rows.append(_general_row(config, dense, corpora))
    for target in config.domains:
        params, tuned = run_baseline(config, dense, corpora, target)
        general, tgt = _scores(config, params, corpora, target.name)
        report.rows.append(_row(target.name, general, tgt, tuned))
        if out_dir is not None:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            path = Path(out_dir) / f"{config.strategy}-{target.name}.ckpt"
            save_model(path, config.model, params)


def _run_prune_tune(config, corpora, report, out_dir, cache_dir):
    base, _ = extracted_general(config, corpora, cache_dir)
    general_mask = inference_mask(base.registry, GENERAL)
    report.rows.append(_general_row(config, base, corpora, general_mask))
    if config.strategy == PRUNE_TUNE:
        for target in config.domains:
            state = prune_tune(base.copy(), domain_spec(config, target, corpora[target.name]))
            general, tgt = _scores(config, state.params, corpora, target.name,
                                   inference_mask(state.registry, target.name),
                                   inference_mask(state.registry, GENERAL))
            report.rows.append(_row(target.name, general, tgt,
                                    state.registry.counts()[target.name]))
            if out_dir is not None:
                save_state(state, Path(out_dir) / f"adapted-{target.name}")
        return
    state = base.copy()
    specs = [domain_spec(config, t, corpora[t.name]) for t in config.domains]
    finished = [GENERAL]

    def snapshot(st, spec):
        finished.append(spec.name)
        scores = {}
        for d in finished:
            res = evaluate(config.model, st.params, corpora[d], config.eval_split,
                           inference_mask(st.registry, d), config.beam_width,
                           config.length_penalty)
            scores[d] = res["accuracy"]
        report.stages.append({"after": spec.name, "scores": scores})

    sequential_adapt(state, specs, on_domain_done=snapshot)
    general_mask = inference_mask(state.registry, GENERAL)
    for spec in specs:
        general, tgt = _scores(config, state.params, corpora, spec.name,
                               inference_mask(state.registry, spec.name), general_mask)
        report.rows.append(_row(spec.name, general, tgt, state.registry.counts()[spec.name]))
    report.meta["final_counts"] = state.registry.counts()
    if out_dir is not None:
        save_state(state, Path(out_dir) / "adapted-sequential")


# -- sweeps -----------------------------------------------------------------------


def _sweep_dirs(out_dir, name):
    """Per-run output directory plus the stage cache shared across the sweep."""
    if out_dir is None:
        return None, None
    return Path(out_dir) / name, Path(out_dir) / "cache"


def sparsity_sweep(config: ExperimentConfig, sparsities=(0.1, 0.3, 0.5, 0.7), out_dir=None):
    """One Prune-Tune report per general sparsity."""
    reports = []
    for s in sparsities:
        cfg = replace(config, general_sparsity=float(s), strategy=PRUNE_TUNE)
        report = run_experiment(cfg, *_sweep_dirs(out_dir, f"sparsity-{s:g}"))
        report.meta["general_sparsity"] = float(s)
        reports.append(report)
    if out_dir is not None:
        _write_csv(Path(out_dir) / "sparsity.csv", ["sparsity", "domain", "general_score",
                   "target_score", "tuned_param_count"],
                   [[r.meta["general_sparsity"], row.domain, row.general_score,
                     row.target_score, row.tuned_param_count]
                    for r in reports for row in r.rows])
    return reports


def order_sweep(config: ExperimentConfig, orders=None, out_dir=None):
    """Sequential adaptation over each domain order (default: given and reversed)."""
    if orders is None:
        names = [d.name for d in config.domains]
        orders = [names, names[::-1]]
    by_name = {d.name: d for d in config.domains}
    reports = []
    for order in orders:
        domains = [by_name[n] for n in order]
        cfg = replace(config, domains=domains, strategy=SEQUENTIAL)
        report = run_experiment(cfg, *_sweep_dirs(out_dir, "order-" + "-".join(order)))
        report.meta["order"] = list(order)
        reports.append(report)
    return reports


def lowresource_sweep(config: ExperimentConfig, fractions=(0.01, 0.03, 0.1, 0.3, 1.0),
                      out_dir=None):
    """Prune-Tune vs full fine-tuning on subsampled copies of the first domain.

    Writes ``lowresource.csv`` with one row per (fraction, strategy).
    """
    if not config.domains:
        raise ContractError("low-resource sweep needs a target domain")
    fractions = [float(f) for f in fractions]
    if any(not 0.0 < f <= 1.0 for f in fractions):
        raise ContractError("fractions must lie in (0, 1]")
    first = config.domains[0]
    reports, rows = [], []
    for f in fractions:
        target = replace(first, train_fraction=f)
        for strategy in (PRUNE_TUNE, "finetune"):
            cfg = replace(config, domains=[target], strategy=strategy)
            report = run_experiment(cfg, *_sweep_dirs(out_dir, f"fraction-{f:g}-{strategy}"))
            report.meta["fraction"] = f
            reports.append(report)
            row = report.row(first.name)
            rows.append([f, strategy, row.general_score, row.target_score,
                         row.tuned_param_count])
    if out_dir is not None:
        _write_csv(Path(out_dir) / "lowresource.csv",
                   ["fraction", "strategy", "general_score", "target_score",
                    "tuned_param_count"], rows)
    return reports


def _write_csv(path, header, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


# -- robustness curves ------------------------------------------------------------


def _dev_score(config, params, corpus, mask=None):
    return evaluate(config.model, params, corpus, "dev", mask, config.beam_width,
                    config.length_penalty)["accuracy"]


def robustness_curves(config: ExperimentConfig, dense: PipelineState, general: PipelineState,
                      corpora, every=100, horizon_factor=3, max_steps=6000) -> dict:
    """Dev-score curves of full fine-tuning and Prune-Tune on the first domain.

    Fine-tuning runs until ``horizon_factor`` times the step of its best dev
    score (evaluated every ``every`` steps, capped at ``max_steps``);
    Prune-Tune then tunes for the same number of steps after its warm-up.
    Returns ``{"finetune": [(step, score)], "prune-tune": [...], "horizon": n}``.
    """
    if every < 1 or horizon_factor < 1:
        raise ContractError("every and horizon_factor must be positive")
    target = config.domains[0]
    corpus = corpora[target.name]
    trainer, batches = finetune_trainer(dense, corpus)
    ft, step = [], 0
    while step < max_steps:
        trainer.run(batches, every)
        step += every
        ft.append((step, _dev_score(config, trainer.params, corpus)))
        best = max(ft, key=lambda p: p[1])[0]
        if step >= horizon_factor * best:
            break
    horizon = step
    state = general.copy()
    spec = domain_spec(config, target, corpus)
    lottery = generate_lottery_subnet(state, spec)
    trainer, batches = domain_trainer(state, spec, lottery)
    mask = inference_mask(state.registry, target.name)
    pt = []
    for step in range(every, horizon + 1, every):
        trainer.run(batches, every)
        pt.append((step, _dev_score(config, state.params, corpus, mask)))
    return {"finetune": ft, PRUNE_TUNE: pt, "horizon": horizon}


def curve_summary(curve) -> dict:
    scores = np.array([s for _, s in curve])
    peak = int(np.argmax(scores))
    return {"peak": float(scores[peak]), "peak_step": int(curve[peak][0]),
            "final": float(scores[-1])}


# -- inspection -------------------------------------------------------------------


def mask_summary(registry) -> str:
    """Per-domain totals followed by per-tensor ownership counts."""
    counts = registry.counts()
    total = registry.total()
    lines = [f"{'owner':<16} {'elements':>10} {'share':>7}"]
    for owner, n in counts.items():
        lines.append(f"{owner:<16} {n:>10d} {100 * n / total:>6.2f}%")
    lines.append("")
    owners = list(counts)
    lines.append(f"{'tensor':<24}" + "".join(f" {o:>10}" for o in owners))
    for tensor, per in registry.tensor_counts().items():
        lines.append(f"{tensor:<24}" + "".join(f" {per.get(o, 0):>10d}" for o in owners))
    return "\n".join(lines)
