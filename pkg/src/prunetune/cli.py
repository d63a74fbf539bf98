"""Command-line interface: ``prunetune <command> [options]``.

Every command reads an experiment config (``--config``, JSON; defaults
otherwise), works inside ``--out-dir`` and reuses finished stages recorded
in its manifest. Errors go to stderr as one JSON object and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .adaptation import GENERAL
from .baselines import STRATEGIES
from .data import Vocab, write_corpus
from .errors import ContractError, PruneTuneError
from .harness import (
    PRUNE_TUNE,
    SEQUENTIAL,
    MIXED,
    ExperimentConfig,
    MetricReport,
    build_corpora,
    dense_general,
    evaluate,
    extracted_general,
    load_config,
    load_state,
    lowresource_sweep,
    mask_summary,
    order_sweep,
    run_experiment,
    save_config,
    sparsity_sweep,
)
from .masks import inference_mask, load_masks

log = logging.getLogger("prunetune")


def _config(args) -> ExperimentConfig:
    config = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    return config


def _data_dir(args):
    return Path(args.out_dir) / "data"


def _corpora(args, config):
    return build_corpora(config, _data_dir(args))


def _emit(obj):
    print(json.dumps(obj, indent=2, sort_keys=True))


# -- commands -----------------------------------------------------------------


def cmd_gen_data(args, config):
    corpora = build_corpora(config)
    data_dir = _data_dir(args)
    written = {}
    for name, corpus in corpora.items():
        written[name] = {split: [str(p) for p in paths]
                         for split, paths in write_corpus(corpus, data_dir).items()}
    symbols = max([config.general.vocab_size] + [d.data.vocab_size for d in config.domains])
    Vocab.for_symbols(symbols).save(data_dir / "vocab.txt")
    save_config(config, Path(args.out_dir) / "config.json")
    _emit({"data_dir": str(data_dir), "corpora": written})


def cmd_train_general(args, config):
    corpora = _corpora(args, config)
    state = dense_general(config, corpora, args.out_dir)
    score = evaluate(config.model, state.params, corpora[GENERAL], config.eval_split)
    _emit({"stage": "train_general", "global_step": state.adam.global_step, **score})


def cmd_extract_subnet(args, config):
    if args.sparsity is not None:
        config = replace(config, general_sparsity=args.sparsity)
    corpora = _corpora(args, config)
    state, _ = extracted_general(config, corpora, args.out_dir)
    mask = inference_mask(state.registry, GENERAL)
    score = evaluate(config.model, state.params, corpora[GENERAL], config.eval_split, mask)
    _emit({"stage": "extract", "sparsity": config.general_sparsity,
           "counts": state.registry.counts(), **score})


def _select_domains(config, names):
    if not names:
        return config
    by_name = {d.name: d for d in config.domains}
    missing = [n for n in names if n not in by_name]
    if missing:
        raise ContractError(f"unknown domains {missing}; config has {list(by_name)}")
    return replace(config, domains=[by_name[n] for n in names])


def _run(args, config):
    report = run_experiment(config, args.out_dir)
    print(report.render())
    return report


def cmd_adapt(args, config):
    config = _select_domains(config, args.domain)
    _run(args, replace(config, strategy=SEQUENTIAL if args.sequential else PRUNE_TUNE))


def cmd_baseline(args, config):
    config = _select_domains(config, args.domain)
    out = Path(args.out_dir) / f"baseline-{args.strategy}"
    report = run_experiment(replace(config, strategy=args.strategy), out, cache_dir=args.out_dir)
    print(report.render())


def _state_dir(args, domain):
    out = Path(args.out_dir)
    candidates = [out / f"adapted-{domain}", out / "adapted-sequential"]
    for c in candidates:
        if (c / "registry.masks").exists() and domain in load_masks(c / "registry.masks").domain_names():
            return c
    return None


def cmd_evaluate(args, config):
    corpora = _corpora(args, config)
    if args.domain not in corpora:
        raise ContractError(f"unknown domain {args.domain!r}; known: {list(corpora)}")
    directory = _state_dir(args, args.domain)
    if directory is not None:
        state = load_state(directory, config.train_config)
    elif args.domain == GENERAL:
        state, _ = extracted_general(config, corpora, args.out_dir)
    else:
        raise ContractError(f"domain {args.domain!r} has not been adapted in {args.out_dir}; "
                            "run `adapt` first")
    mask = inference_mask(state.registry, args.domain)
    score = evaluate(config.model, state.params, corpora[args.domain], args.split, mask,
                     config.beam_width, config.length_penalty)
    _emit({"domain": args.domain, "split": args.split, "state": str(directory or "general"),
           **score})


def cmd_inspect_masks(args, config):
    path = args.masks
    if path is None:
        out = Path(args.out_dir)
        found = sorted(out.rglob("registry.masks"), key=lambda p: p.stat().st_mtime)
        if not found:
            raise ContractError(f"no .masks files under {out}")
        path = found[-1]
    print(f"# {path}")
    print(mask_summary(load_masks(path)))


def cmd_sweep(args, config):
    out = Path(args.out_dir) / f"sweep-{args.kind}"
    if args.kind == "sparsity":
        values = args.values or [0.1, 0.3, 0.5, 0.7]
        reports = sparsity_sweep(config, values, out)
    elif args.kind == "fraction":
        values = args.values or [0.01, 0.03, 0.1, 0.3, 1.0]
        reports = lowresource_sweep(config, values, out)
    else:
        reports = order_sweep(config, out_dir=out)
    for r in reports:
        print(r.render())
        print()


def cmd_report(args, config):
    paths = args.paths or sorted(Path(args.out_dir).rglob("report.json"))
    if not paths:
        raise ContractError(f"no report.json files under {args.out_dir}")
    for p in paths:
        print(f"# {p}")
        print(MetricReport.load(p).render())
        print()


# -- parser -------------------------------------------------------------------


def _global_flags(parser, suppress):
    default = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--config", default=default(None), help="experiment config (JSON)")
    parser.add_argument("--seed", type=int, default=default(None), help="override config seed")
    parser.add_argument("--out-dir", default=default("runs"), help="artifact directory")
    parser.add_argument("-v", "--verbose", action="store_true", default=default(False))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="prunetune", description=__doc__.splitlines()[0])
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help):
        p = sub.add_parser(name, help=help)
        _global_flags(p, suppress=True)
        p.set_defaults(func=func)
        return p

    add("gen-data", cmd_gen_data, "write synthetic corpora and the vocabulary")
    add("train-general", cmd_train_general, "train the dense general model")
    p = add("extract-subnet", cmd_extract_subnet, "prune and freeze the general sub-network")
    p.add_argument("--sparsity", type=float, help="override general_sparsity")
    p = add("adapt", cmd_adapt, "Prune-Tune adaptation to the target domains")
    p.add_argument("--sequential", action="store_true", help="adapt domains in one network")
    p.add_argument("--domain", action="append", help="restrict to these domains")
    p = add("baseline", cmd_baseline, "run a fine-tuning baseline")
    p.add_argument("--strategy", required=True, choices=STRATEGIES + (MIXED,))
    p.add_argument("--domain", action="append", help="restrict to these domains")
    p = add("evaluate", cmd_evaluate, "score one domain with its inference mask")
    p.add_argument("--domain", required=True)
    p.add_argument("--split", default="test", choices=("train", "dev", "test"))
    p = add("inspect-masks", cmd_inspect_masks, "print ownership counts of a .masks file")
    p.add_argument("--masks", help="file to inspect (default: newest under --out-dir)")
    p = add("sweep", cmd_sweep, "sparsity, low-resource fraction or domain-order sweep")
    p.add_argument("kind", choices=("sparsity", "fraction", "order"))
    p.add_argument("--values", type=float, nargs="+", help="sparsities or fractions")
    p = add("report", cmd_report, "render report tables")
    p.add_argument("paths", nargs="*", help="report.json files (default: all under --out-dir)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = _config(args)
        args.func(args, config)
    except (PruneTuneError, OSError) as exc:
        err = {"error": type(exc).__name__, "message": str(exc), "command": args.command}
        print(json.dumps(err), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
