"""Pretraining and the round-based unlearning loop for every method."""

import csv
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import geometry, losses
from .corpus import FORGET, RETAIN
from .exceptions import DivergenceError, ValidationError
from .geometry import GradientSet, common_descent_direction, conflict_flags, project_to_null_space
from .model import TokenBatch, flatten, init_model, loss_and_grad, reference_log_probs, unflatten

METHODS = (
    "mollm",
    "ga_weighted_sum",
    "ga_ogd",
    "retain_finetune",
    "relabeling",
    "ablation1_ce_ga",
    "ablation2_ce_ga_small_lr",
    "ablation3_forget_only",
)
GA_METHODS = ("ga_weighted_sum", "ga_ogd", "ablation1_ce_ga", "ablation2_ce_ga_small_lr")
DUAL_SPACE_METHODS = ("mollm", "ablation1_ce_ga", "ablation2_ce_ga_small_lr")
FINETUNE_METHODS = ("retain_finetune", "relabeling")

EARLY_STOP_RESIDUAL = 1e-7
PRETRAIN_TOL = 1e-6

RECORD_COLUMNS = (
    "round",
    "lr",
    "L_fgt",
    "L_KL",
    "L_rt",
    "gnorm_fgt",
    "gnorm_KL",
    "gnorm_rt",
    "direction_norm",
    "conflict_fgt",
    "conflict_KL",
    "conflict_rt",
    "stationarity_residual",
)


@dataclass(frozen=True)
class UnlearnConfig:
    method: str = "mollm"
    epsilon: float = losses.DEFAULT_EPSILON
    lr0: float = 0.01
    lr_decay: float = 0.999
    weights: tuple = (1.0, 1.0, 1.0)
    clip_norm: float = None
    rounds: int = 2000
    seed: int = 0
    kl_normalization: str = "per_token"
    name: str = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValidationError(f"unknown method {self.method!r}; expected one of {METHODS}")
        losses.check_epsilon(self.epsilon)
        if not self.lr0 > 0:
            raise ValidationError("lr0 must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ValidationError("lr_decay must lie in (0, 1]")
        if int(self.rounds) != self.rounds or self.rounds < 1:
            raise ValidationError("rounds must be a positive integer")
        w = tuple(float(x) for x in self.weights)
        if len(w) != 3 or min(w) < 0 or max(w) == 0:
            raise ValidationError("weights must be 3 non-negative numbers, not all zero")
        object.__setattr__(self, "weights", w)
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ValidationError("clip_norm must be positive when set")
        if self.kl_normalization not in ("sum", "per_token"):
            raise ValidationError("kl_normalization must be 'sum' or 'per_token'")
        object.__setattr__(self, "rounds", int(self.rounds))
        if self.name is None:
            object.__setattr__(self, "name", self.method)

    @classmethod
    def for_method(cls, method, **overrides):
        """Config with the method's default learning rate and clipping."""
        base = {}
        if method in GA_METHODS:
            base["clip_norm"] = 1.0
        if method == "ablation2_ce_ga_small_lr":
            base["lr0"] = cls.lr0 / 10
        base.update(overrides)
        return cls(method=method, **base)

    @property
    def forget_mode(self):
        return "ga-ce" if self.method in GA_METHODS else "uce"

    def to_dict(self):
        d = asdict(self)
        d["weights"] = list(self.weights)
        return d

    @classmethod
    def from_dict(cls, doc):
        doc = dict(doc)
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"unknown config fields {sorted(unknown)}")
        if "method" not in doc:
            raise ValidationError("config needs a method")
        return cls.for_method(doc.pop("method"), **doc)


@dataclass(frozen=True)
class UpdateRecord:
    round: int
    lr: float
    losses: tuple
    grad_norms: tuple
    direction_norm: float
    conflicts: tuple
    stationarity_residual: float

    def as_row(self):
        return [self.round, self.lr, *self.losses, *self.grad_norms, self.direction_norm, *(int(c) for c in self.conflicts), self.stationarity_residual]


@dataclass
class Objectives:
    """Objective values and gradients at one parameter point."""

    gradients: GradientSet
    losses: tuple
    norms: np.ndarray = field(repr=False)
    clipped: GradientSet = None


class Problem:
    """Forget/retain batches and the reference model for one unlearning run."""

    def __init__(self, corpus, ref_params, context_window=None):
        W = context_window or ref_params.dims.context_window
        self.dims = ref_params.dims
        self.ref_params = ref_params
        self.forget = corpus.batch(FORGET, W)
        self.retain = corpus.batch(RETAIN, W)
        self.all = corpus.batch("all", W)
        if len(self.forget) == 0 or len(self.retain) == 0:
            raise ValidationError("forget and retain splits must both be nonempty")
        self.ref_log_probs = reference_log_probs(ref_params, self.retain)


def compute_objective_gradients(params, problem, config):
    """Values and gradients of (forget, KL, retain), with optional clipping.

    The forget objective is UCE for non-GA methods and negated CE for GA
    methods. Reported norms are the pre-clipping norms.
    """
    eps = config.epsilon
    mode = "fgt-ga-ce" if config.forget_mode == "ga-ce" else "fgt-uce"
    L_fgt, g_fgt = loss_and_grad(params, problem.forget, mode, eps=eps)
    L_kl, g_kl = loss_and_grad(
        params, problem.retain, "kl", ref_log_probs=problem.ref_log_probs, kl_normalization=config.kl_normalization
    )
    L_rt, g_rt = loss_and_grad(params, problem.retain, "rt-ce")
    G = np.vstack([g_fgt, g_kl, g_rt])
    if not np.all(np.isfinite(G)):
        raise DivergenceError("non-finite objective gradient")
    gs = GradientSet(G)
    with np.errstate(over="ignore"):
        norms = gs.norms
    if not np.all(np.isfinite(norms)):
        raise DivergenceError("objective gradient norm overflows")
    clipped = gs
    if config.clip_norm is not None:
        factors = np.where(norms > config.clip_norm, config.clip_norm / np.where(norms > 0, norms, 1.0), 1.0)
        clipped = GradientSet(G * factors[:, None])
    return Objectives(gs, (L_fgt, L_kl, L_rt), norms, clipped)


def _result(d, g):
    dots = g.gradients @ d
    return geometry.DirectionResult(
        direction=d,
        dual_norms=np.zeros(g.m),
        dot_products=dots,
        degenerate_mask=np.zeros(g.m, dtype=bool),
        stationary=not np.any(d),
        scale_applied=1.0,
        mode="explicit",
        raw_dot_products=dots,
    )


def direction_for_method(g, config, scale_norms=None):
    """Update direction for the three-objective methods.

    ``scale_norms`` (default: the norms of ``g``) sets the length the
    dual-space direction is rescaled to, so clipped gradients can still be
    scaled by their original norms.
    """
    method = config.method
    G = g.gradients
    if method in DUAL_SPACE_METHODS:
        res = common_descent_direction(g)
        if scale_norms is None or res.stationary:
            return res
        active = geometry._active_mask(scale_norms)
        length = np.linalg.norm(res.direction)
        d = res.direction * (scale_norms[active].min() / length)
        return replace(res, direction=d, dot_products=G @ d, scale_applied=res.scale_applied * scale_norms[active].min() / length)
    if method == "ga_weighted_sum":
        return _result(-(np.asarray(config.weights) @ G), g)
    if method == "ga_ogd":
        return _result(-project_to_null_space(G[0], G[1:]), g)
    if method == "ablation3_forget_only":
        return _result(-G[0].copy(), g)
    raise ValidationError(f"method {method!r} does not use the three-objective direction")


def conflict_probabilities(records):
    """Percentage of rounds in which the applied direction conflicted with each objective."""
    if not records:
        raise ValidationError("no update records")
    flags = np.array([r.conflicts for r in records], dtype=bool)
    return tuple(float(x) for x in 100.0 * flags.sum(axis=0) / len(records))


def pretrain(params, corpus, epochs, lr, tol=PRETRAIN_TOL, history=None):
    """Full-batch gradient descent on the mean per-sequence CE over all sequences.

    Stops after ``epochs`` steps or when an epoch improves the loss by less
    than ``tol``. Loss values are appended to ``history`` when given.
    """
    if len(corpus.sequences) == 0:
        raise ValidationError("corpus is empty")
    if epochs <= 0:
        return params
    batch = corpus.batch("all", params.dims.context_window)
    n_seq = len(corpus.sequences)
    dims = params.dims
    theta = flatten(params)
    prev = np.inf
    for _ in range(int(epochs)):
        value, grad = loss_and_grad(unflatten(theta, dims), batch, "rt-ce")
        value /= n_seq
        if not np.isfinite(value) or not np.all(np.isfinite(grad)):
            raise DivergenceError("pretraining diverged")
        if history is not None:
            history.append(value)
        if prev - value < tol:
            break
        prev = value
        theta = theta - lr * grad / n_seq
    return unflatten(theta, dims)


def relabel_targets(batch, seed):
    """Replace every target with a uniformly random token (seeded)."""
    rng = np.random.default_rng([seed, 3])
    return batch.with_targets(rng.integers(0, batch.vocab_size, size=len(batch)))


def _concat(a, b):
    return TokenBatch(
        np.vstack([a.contexts, b.contexts]),
        np.concatenate([a.targets, b.targets]),
        np.concatenate([a.seq_ids, b.seq_ids]),
        a.vocab_size,
    )


def run_unlearning(theta0, corpus, config, on_record=None):
    """Iterate ``theta <- theta + lr_t * d_t`` for ``config.rounds`` rounds.

    ``lr_t = lr0 * lr_decay**t``. Every round records the three objectives,
    the pre-clipping gradient norms, the applied direction and its conflict
    flags, all measured at the pre-update point. The loop stops early once
    the min-norm residual over the non-zero gradients is at most 1e-7.

    Returns
    -------
    (ModelParams, list of UpdateRecord)
    """
    problem = Problem(corpus, theta0)
    dims = theta0.dims
    method = config.method

    finetune_batch = None
    if method == "retain_finetune":
        params = init_model(dims, config.seed)
        finetune_batch = problem.retain
    else:
        params = theta0
        if method == "relabeling":
            finetune_batch = _concat(relabel_targets(problem.forget, config.seed), problem.retain)

    theta = flatten(params)
    records = []
    for t in range(config.rounds):
        params = unflatten(theta, dims)
        try:
            obj = compute_objective_gradients(params, problem, config)
        except DivergenceError as exc:
            last = records[-1] if records else None
            raise DivergenceError(f"{config.name}: {exc} at round {t}", last, params, records) from exc
        g = obj.gradients
        if finetune_batch is not None:
            d = -loss_and_grad(params, finetune_batch, "rt-ce")[1]
        else:
            d = direction_for_method(obj.clipped, config, scale_norms=obj.norms).direction
        active = geometry._active_mask(obj.norms)
        residual = geometry.pareto_stationarity_measure(GradientSet(g.gradients[active])).residual_norm if active.any() else 0.0
        lr = config.lr0 * config.lr_decay ** t
        rec = UpdateRecord(
            round=t,
            lr=lr,
            losses=tuple(float(x) for x in obj.losses),
            grad_norms=tuple(float(x) for x in obj.norms),
            direction_norm=float(np.linalg.norm(d)),
            conflicts=tuple(bool(c) for c in conflict_flags(d, g)),
            stationarity_residual=float(residual),
        )
        records.append(rec)
        if on_record is not None:
            on_record(rec)
        if not np.all(np.isfinite(rec.losses)):
            raise DivergenceError(f"{config.name}: non-finite loss at round {t}", rec, params, records)
        theta = theta + lr * d
        if not np.all(np.isfinite(theta)):
            raise DivergenceError(f"{config.name}: non-finite parameters after round {t}", rec, params, records)
        if finetune_batch is None and residual <= EARLY_STOP_RESIDUAL:
            break
    return unflatten(theta, dims), records


def write_records_csv(path, records):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(RECORD_COLUMNS)
        for rec in records:
            writer.writerow([repr(x) if isinstance(x, float) else x for x in rec.as_row()])


def read_records_csv(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != RECORD_COLUMNS:
            raise ValidationError(f"unexpected records header {header}")
        out = []
        for row in reader:
            v = [float(x) for x in row]
            out.append(UpdateRecord(int(v[0]), v[1], tuple(v[2:5]), tuple(v[5:8]), v[8], tuple(bool(x) for x in v[9:12]), v[12]))
        return out


def save_manifest(path, config):
    Path(path).write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")


def load_manifest(path):
    return UnlearnConfig.from_dict(json.loads(Path(path).read_text()))
