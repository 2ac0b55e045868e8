"""Token-level objectives: cross-entropy, unlearning cross-entropy, KL retention.

Per-sequence losses average over the K tokens of the sequence; dataset
objectives sum those per-sequence values. Rows of ``probs``/``logits`` are
aligned with ``targets``. ``seq_ids`` (when given) assigns each row to a
sequence; rows without ``seq_ids`` form a single sequence.
"""

import warnings

import numpy as np

from .exceptions import DivergenceWarning, ValidationError
from .validation import check_epsilon, check_probabilities, check_tokens

DEFAULT_EPSILON = 0.01
FORGET_MODES = ("uce", "ga-ce")


def softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def sequence_weights(seq_ids, n_rows):
    """Per-row weight 1/K_s so that a weighted sum equals the sum of per-sequence means."""
    if seq_ids is None:
        return np.full(n_rows, 1.0 / n_rows) if n_rows else np.zeros(0)
    seq_ids = np.asarray(seq_ids)
    _, inverse, counts = np.unique(seq_ids, return_inverse=True, return_counts=True)
    return 1.0 / counts[inverse]


def _target_probs(probs, targets):
    probs = check_probabilities(probs)
    targets = check_tokens(targets, probs.shape[1], "targets")
    if targets.shape[0] != probs.shape[0]:
        raise ValidationError("probs and targets must have the same number of rows")
    return probs[np.arange(len(targets)), targets]


def _sentinel(what):
    warnings.warn(f"{what}: log(0) encountered, returning +inf", DivergenceWarning, stacklevel=3)
    return float("inf")


def ce_terms(p_target):
    with np.errstate(divide="ignore"):
        return -np.log(p_target)


def uce_terms(p_target, eps):
    return -np.log1p(-(1.0 - eps) * p_target)


def ce_loss(probs, targets):
    """Mean negative log-likelihood of the targets; +inf if a target has probability 0."""
    pt = _target_probs(probs, targets)
    if pt.size == 0:
        raise ValidationError("need at least one token")
    if np.any(pt == 0.0):
        return _sentinel("ce_loss")
    return float(ce_terms(pt).mean())


def uce_loss(probs, targets, eps=DEFAULT_EPSILON):
    """Mean of ``-log(1 - (1 - eps) p_target)``; bounded in ``[0, -log eps]``."""
    eps = check_epsilon(eps)
    pt = _target_probs(probs, targets)
    if pt.size == 0:
        raise ValidationError("need at least one token")
    return float(uce_terms(pt, eps).mean())


def kl_terms(ref_probs, cur_probs):
    """Row-wise KL(ref || cur); inf where cur is 0 under ref mass."""
    ref = np.asarray(ref_probs, dtype=np.float64)
    cur = np.asarray(cur_probs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(ref > 0, ref * (np.log(ref) - np.log(cur)), 0.0)
    return terms.sum(axis=-1)


def kl_retention(ref_probs, cur_probs, seq_ids=None, normalization="sum"):
    """KL divergence of the current model from the reference model on retain tokens.

    The reference (original) distribution is the first argument. With
    ``normalization="sum"`` all positions are summed; ``"per_token"``
    averages within each sequence before summing over sequences.
    """
    ref = check_probabilities(ref_probs, "ref_probs")
    cur = check_probabilities(cur_probs, "cur_probs")
    if ref.shape != cur.shape:
        raise ValidationError(f"shape mismatch {ref.shape} vs {cur.shape}")
    terms = kl_terms(ref, cur)
    if np.any(np.isinf(terms)):
        return _sentinel("kl_retention")
    return float(np.sum(terms * _kl_weights(seq_ids, len(terms), normalization)))


def _kl_weights(seq_ids, n_rows, normalization):
    if normalization == "sum":
        return np.ones(n_rows)
    if normalization == "per_token":
        if seq_ids is None:
            seq_ids = np.zeros(n_rows, dtype=np.int64)
        return sequence_weights(seq_ids, n_rows)
    raise ValidationError(f"unknown KL normalization {normalization!r}")


def _onehot(targets, C):
    out = np.zeros((len(targets), C))
    out[np.arange(len(targets)), targets] = 1.0
    return out


def _check_logits(logits, targets):
    z = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    t = check_tokens(targets, z.shape[1], "targets")
    if t.shape[0] != z.shape[0]:
        raise ValidationError("logits and targets must have the same number of rows")
    return z, t


def ce_logit_gradient(logits, targets, weights=None):
    """Gradient of the CE loss with respect to the logits: ``w_i (softmax(z_i) - onehot_i)``.

    ``weights`` defaults to 1/K for every row (a single sequence).
    """
    z, t = _check_logits(logits, targets)
    w = np.full(len(t), 1.0 / len(t)) if weights is None else np.asarray(weights, dtype=np.float64)
    return w[:, None] * (softmax(z) - _onehot(t, z.shape[1]))


def uce_dloss_dpt(p_target, eps):
    """Derivative of the per-token UCE term with respect to the target probability."""
    return (1.0 - eps) / (1.0 - (1.0 - eps) * np.asarray(p_target, dtype=np.float64))


def uce_logit_gradient(logits, targets, eps=DEFAULT_EPSILON, weights=None):
    """Gradient of the UCE loss with respect to the logits.

    Per row: ``w_i * (1-eps) p_t / (1 - (1-eps) p_t) * (onehot - softmax(z))``,
    so descent lowers the target probability.
    """
    eps = check_epsilon(eps)
    z, t = _check_logits(logits, targets)
    w = np.full(len(t), 1.0 / len(t)) if weights is None else np.asarray(weights, dtype=np.float64)
    p = softmax(z)
    pt = p[np.arange(len(t)), t]
    coef = w * uce_dloss_dpt(pt, eps) * pt
    return coef[:, None] * (_onehot(t, z.shape[1]) - p)


def kl_logit_gradient(ref_probs, logits, weights=None):
    """Gradient of ``sum_i w_i KL(ref_i || softmax(z_i))`` with respect to the logits."""
    z = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    ref = np.atleast_2d(np.asarray(ref_probs, dtype=np.float64))
    w = np.ones(len(z)) if weights is None else np.asarray(weights, dtype=np.float64)
    # each reference row sums to 1, so d/dz of -sum(ref log softmax z) is softmax(z) - ref
    return w[:, None] * (softmax(z) - ref)


def forget_objective(probs, targets, seq_ids=None, mode="uce", eps=DEFAULT_EPSILON):
    """Objective on the forget split, summed over sequences.

    ``mode="uce"`` sums the bounded unlearning loss; ``mode="ga-ce"`` returns
    the negated summed cross-entropy, which is unbounded below.
    """
    if mode not in FORGET_MODES:
        raise ValidationError(f"unknown forget mode {mode!r}")
    probs = np.asarray(probs, dtype=np.float64)
    if probs.size == 0 or len(targets) == 0:
        return 0.0
    pt = _target_probs(probs, targets)
    w = sequence_weights(seq_ids, len(pt))
    if mode == "uce":
        eps = check_epsilon(eps)
        return float(np.sum(w * uce_terms(pt, eps)))
    if np.any(pt == 0.0):
        return -_sentinel("forget_objective")
    return float(-np.sum(w * ce_terms(pt)))


def retain_objective(probs, targets, seq_ids=None):
    """Cross-entropy on the retain split, averaged within and summed across sequences."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.size == 0 or len(targets) == 0:
        return 0.0
    pt = _target_probs(probs, targets)
    if np.any(pt == 0.0):
        return _sentinel("retain_objective")
    return float(np.sum(sequence_weights(seq_ids, len(pt)) * ce_terms(pt)))


def finite_difference_check(fun, grad, x, h=1e-5):
    """Largest coordinate-wise relative error between ``grad(x)`` and central differences.

    The relative error uses ``max(|a|, |b|, 1e-12)`` as denominator.
    """
    x = np.array(x, dtype=np.float64)
    analytic = np.asarray(grad(x), dtype=np.float64).reshape(x.shape)
    numeric = np.empty_like(x)
    flat, out = x.reshape(-1), numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fun(x)
        flat[i] = orig - h
        fm = fun(x)
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * h)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric) / denom)) if x.size else 0.0
