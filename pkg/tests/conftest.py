import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from prunetune.data import SyntheticDomainSpec  # noqa: E402
from prunetune.harness import (  # noqa: E402
    ExperimentConfig,
    TargetDomain,
    build_corpora,
    dense_general,
    extracted_general,
)
from prunetune.model import ModelConfig  # noqa: E402


def tiny_config(**overrides) -> ExperimentConfig:
    """A seconds-scale experiment for pipeline plumbing tests."""
    base = dict(
        model=ModelConfig(num_layers=1, model_dim=16, ffn_dim=32, heads=2, vocab_size=16,
                          max_len=10),
        general=SyntheticDomainSpec("general", "copy", vocab_size=10, min_len=2, max_len=5,
                                    sizes=(64, 16, 16), seed=1),
        domains=[
            TargetDomain(SyntheticDomainSpec("rev", "reverse", vocab_size=10, min_len=2,
                                             max_len=5, sizes=(32, 16, 16), seed=2)),
            TargetDomain(SyntheticDomainSpec("shf", "shift", vocab_size=10, min_len=2,
                                             max_len=5, sizes=(32, 16, 16), seed=3)),
        ],
        batch_size=8,
        lr_warmup=10,
        general_steps=20,
        prune_steps=20,
        prune_interval=5,
        warmup_steps=5,
        tune_steps=10,
        fisher_batches=2,
    )
    base.update(overrides)
    return ExperimentConfig(**base)


@pytest.fixture
def tiny():
    return tiny_config()


@pytest.fixture(scope="session")
def general_run(tmp_path_factory):
    """Dense and 50%-extracted general models trained on the copy task.

    Returns ``(config, corpora, dense, extracted)``.
    """
    config = ExperimentConfig()
    out = tmp_path_factory.mktemp("general")
    corpora = build_corpora(config)
    dense = dense_general(config, corpora, out)
    extracted, _ = extracted_general(config, corpora, out, dense=dense)
    return config, corpora, dense, extracted



def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion, whatever the verbosity."""
    lines = {}
    for key in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(key, []):
            if "test_acceptance" not in getattr(rep, "nodeid", ""):
                continue
            props = dict(getattr(rep, "user_properties", []))
            if "acceptance" in props:
                lines[rep.nodeid] = props["acceptance"]
            elif rep.failed:
                name = rep.nodeid.split("::")[-1]  # test_criterion_<n>_...
                lines.setdefault(rep.nodeid, f"criterion {name.split('_')[2]}: FAIL ({name} raised)")
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(lines.values()):
            terminalreporter.write_line(line)
