"""Multi-pass transformer encoders on a small numpy autodiff engine.

The encoder stack is evaluated several times with tied weights; later passes
re-read the embedded source and receive per-layer infusions tapped from the
previous pass through a hard (permutation) or soft (learned mixing) connection.
"""

from .checkpoint import Checkpoint, average_checkpoints
from .decoding import DecodeConfig, Hypothesis, beam_decode, beam_search, greedy_search
from .errors import (
    CheckpointError,
    ConfigurationError,
    ContractError,
    DimensionError,
    DivergedError,
    LengthError,
    MptError,
    SchemaError,
    VocabularyError,
)
from .experiment import ExperimentConfig, evaluate_model, load_experiment, parse_experiment, run_ablation
from .metrics import corpus_bleu, token_and_sequence_accuracy
from .model import MultiPassTransformer, count_params
from .multipass import ConnectionSpec, MptConfig, RoutingPattern, format_perm, parse_perm
from .search import (
    HammingSurrogate,
    SearchLedger,
    SearchPolicy,
    SearchSpace,
    enumerate_search,
    evaluate_candidate,
    run_search,
)
from .tasks import BOS, EOS, PAD, ToyTask, generate_batch
from .tensor import Tensor, gradcheck, no_grad
from .training import TrainConfig, label_smoothed_ce, lr_schedule, train

__version__ = "0.1.0"

__all__ = [
    "BOS", "EOS", "PAD",
    "Checkpoint", "CheckpointError", "ConfigurationError", "ConnectionSpec", "ContractError",
    "DecodeConfig", "DimensionError", "DivergedError", "ExperimentConfig", "HammingSurrogate",
    "Hypothesis", "LengthError", "MptConfig", "MptError", "MultiPassTransformer", "RoutingPattern",
    "SchemaError", "SearchLedger", "SearchPolicy", "SearchSpace", "Tensor", "ToyTask", "TrainConfig",
    "VocabularyError",
    "average_checkpoints", "beam_decode", "beam_search", "corpus_bleu", "count_params",
    "enumerate_search", "evaluate_candidate", "evaluate_model", "format_perm", "generate_batch",
    "gradcheck", "greedy_search", "label_smoothed_ce", "load_experiment", "lr_schedule", "no_grad",
    "parse_experiment", "parse_perm", "run_ablation", "run_search", "token_and_sequence_accuracy", "train",
]
