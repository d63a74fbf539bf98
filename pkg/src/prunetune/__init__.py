"""Prune-Tune domain adaptation for a tiny numpy seq2seq Transformer.

A general model is gradually pruned; its surviving weights are frozen and
the freed weights are handed out, disjointly, to target domains. Each
domain decodes with its own binary mask, so adapting to a new domain never
changes the outputs of an earlier one.
"""

from .adaptation import (
    GENERAL,
    DomainSpec,
    PipelineState,
    extract_general_subnet,
    generate_lottery_subnet,
    prune_tune,
    sequential_adapt,
    train_general,
    tune_domain,
)
from .baselines import (
    DistillState,
    EwcState,
    adapter_tune,
    distill_finetune,
    ewc_finetune,
    full_finetune,
    layer_freeze_tune,
)
from .data import ParallelCorpus, SyntheticDomainSpec, gen_synthetic_domain
from .decoding import greedy_decode, translate
from .errors import (
    CapacityError,
    ChecksumError,
    ContractError,
    DataError,
    FormatError,
    NumericError,
    NumericOverflowError,
    OverlapError,
    PruneTuneError,
    ShapeError,
    TruncatedError,
    VersionError,
)
from .estimator import PruneTuneTranslator, check_parallel, check_token_sequences
from .harness import ExperimentConfig, MetricReport, evaluate, run_experiment
from .masks import BinaryMask, MaskRegistry, inference_mask, new_registry, trainable_mask
from .metrics import corpus_bleu, token_accuracy
from .model import AdapterConfig, ModelConfig, attach_adapters, init_params, transformer_forward
from .optim import AdamState, LRSchedule, adam_step
from .params import ParamStore, ParamTag
from .pruning import PruneSchedule, gradual_prune, magnitude_prune_layer, sparsity_at

__version__ = "0.1.0"
