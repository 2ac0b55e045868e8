"""Multi-objective unlearning: bounded forget loss, dual-space common descent, toy testbed."""

from .corpus import Corpus, CorpusSpec, generate_corpus, load_corpus, save_corpus
from .engine import METHODS, UnlearnConfig, UpdateRecord, conflict_probabilities, direction_for_method, pretrain, run_unlearning
from .exceptions import DivergenceError, DivergenceWarning, ValidationError
from .geometry import (
    DirectionResult,
    GradientSet,
    ParetoCertificate,
    common_descent_direction,
    conflict_flags,
    dual_vectors,
    min_norm_weights,
    pareto_stationarity_measure,
    project_to_null_space,
)
from .harness import ExperimentSpec, ResultRow, emit_table, evaluate, run_experiment
from .losses import ce_loss, forget_objective, kl_retention, retain_objective, uce_loss
from .model import Dims, ModelParams, TokenBatch, flatten, init_model, loss_and_grad, perplexity_fluency, unflatten

__version__ = "0.1.0"
