"""Next-token softmax model: token embeddings, concatenated context, linear decoder.

``logits = concat(embed[x_1], ..., embed[x_W]) @ decode + bias``.
Flattened parameter order is embed, decode, bias (row-major).
"""

import json
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from . import losses
from .exceptions import ValidationError
from .validation import check_epsilon, check_tokens, check_vector

CHECKPOINT_FORMAT = "mollm-checkpoint"
CHECKPOINT_VERSION = 1
OBJECTIVES = ("fgt-uce", "fgt-ga-ce", "rt-ce", "kl")


@dataclass(frozen=True)
class Dims:
    vocab_size: int = 32
    embed_dim: int = 8
    context_window: int = 2

    def __post_init__(self):
        for name in ("vocab_size", "embed_dim", "context_window"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ValidationError(f"{name} must be a positive integer, got {value}")
            object.__setattr__(self, name, int(value))

    @property
    def n_params(self):
        C, E, W = self.vocab_size, self.embed_dim, self.context_window
        return C * E + E * W * C + C

    def as_dict(self):
        return {"vocab_size": self.vocab_size, "embed_dim": self.embed_dim, "context_window": self.context_window}


@dataclass(frozen=True, eq=False)
class ModelParams:
    embed: np.ndarray
    decode: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        C, E = self.embed.shape
        if self.decode.shape[1] != C or self.decode.shape[0] % E or self.bias.shape != (C,):
            raise ValidationError("inconsistent parameter shapes")
        for arr in (self.embed, self.decode, self.bias):
            if not np.all(np.isfinite(arr)):
                raise ValidationError("parameters contain NaN or Inf")

    @property
    def dims(self):
        C, E = self.embed.shape
        return Dims(C, E, self.decode.shape[0] // E)

    def __eq__(self, other):
        if not isinstance(other, ModelParams):
            return NotImplemented
        return all(np.array_equal(a, b) for a, b in zip(self._arrays(), other._arrays()))

    def _arrays(self):
        return (self.embed, self.decode, self.bias)


def init_model(dims, seed):
    """Uniform(-0.1, 0.1) weights, zero bias, deterministic in ``seed``."""
    if not isinstance(dims, Dims):
        dims = Dims(**dims)
    rng = np.random.default_rng(seed)
    C, E, W = dims.vocab_size, dims.embed_dim, dims.context_window
    embed = rng.uniform(-0.1, 0.1, size=(C, E))
    decode = rng.uniform(-0.1, 0.1, size=(E * W, C))
    return ModelParams(embed, decode, np.zeros(C))


def zero_model(dims):
    C, E, W = dims.vocab_size, dims.embed_dim, dims.context_window
    return ModelParams(np.zeros((C, E)), np.zeros((E * W, C)), np.zeros(C))


def flatten(params):
    return np.concatenate([params.embed.ravel(), params.decode.ravel(), params.bias])


def unflatten(v, dims):
    if not isinstance(dims, Dims):
        dims = Dims(**dims)
    v = check_vector(v, "parameter vector")
    if v.shape[0] != dims.n_params:
        raise ValidationError(f"expected {dims.n_params} parameters, got {v.shape[0]}")
    C, E, W = dims.vocab_size, dims.embed_dim, dims.context_window
    a, b = C * E, C * E + E * W * C
    return ModelParams(v[:a].reshape(C, E).copy(), v[a:b].reshape(E * W, C).copy(), v[b:].copy())


@dataclass(frozen=True)
class TokenBatch:
    """Next-token prediction rows: contexts (N, W), targets (N,), owning sequence ids (N,)."""

    contexts: np.ndarray
    targets: np.ndarray
    seq_ids: np.ndarray
    vocab_size: int

    def __post_init__(self):
        ctx = np.atleast_2d(check_tokens(self.contexts, self.vocab_size, "contexts"))
        tgt = check_tokens(self.targets, self.vocab_size, "targets").reshape(-1)
        ids = np.asarray(self.seq_ids, dtype=np.int64).reshape(-1)
        if not (ctx.shape[0] == tgt.shape[0] == ids.shape[0]):
            raise ValidationError("contexts, targets and seq_ids must have equal length")
        object.__setattr__(self, "contexts", ctx)
        object.__setattr__(self, "targets", tgt)
        object.__setattr__(self, "seq_ids", ids)

    @classmethod
    def from_sequences(cls, sequences, context_window, vocab_size, seq_ids=None):
        """Predict token ``i`` from tokens ``i-W .. i-1`` for every ``i >= W``."""
        W = context_window
        ctx, tgt, ids = [], [], []
        for k, seq in enumerate(sequences):
            seq = np.asarray(seq, dtype=np.int64)
            if seq.shape[0] <= W:
                raise ValidationError(f"sequence {k} is too short for context window {W}")
            sid = k if seq_ids is None else seq_ids[k]
            for i in range(W, seq.shape[0]):
                ctx.append(seq[i - W:i])
                tgt.append(seq[i])
                ids.append(sid)
        if not ctx:
            return cls(np.zeros((0, W), dtype=np.int64), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), vocab_size)
        return cls(np.array(ctx), np.array(tgt), np.array(ids), vocab_size)

    def __len__(self):
        return self.targets.shape[0]

    @property
    def n_sequences(self):
        return len(np.unique(self.seq_ids))

    def with_targets(self, targets):
        return TokenBatch(self.contexts, targets, self.seq_ids, self.vocab_size)

    @cached_property
    def _grouping(self):
        if len(self) == 0:
            return np.zeros((0, self.contexts.shape[1]), dtype=np.int64), np.zeros(0, dtype=np.int64)
        return np.unique(self.contexts, axis=0, return_inverse=True)

    @cached_property
    def _row_weights(self):
        return losses.sequence_weights(self.seq_ids, len(self))

    def compressed(self):
        """Distinct contexts (U, W) and target weights (U, C).

        ``T[u, c]`` sums the per-sequence weights 1/K_s of all rows with
        context ``u`` and target ``c``, so weighted sums over ``T`` equal the
        sum of per-sequence token means.
        """
        uctx, inverse = self._grouping
        if "_T" not in self.__dict__:
            T = np.zeros((uctx.shape[0], self.vocab_size))
            np.add.at(T, (inverse.reshape(-1), self.targets), self._row_weights)
            self.__dict__["_T"] = T
        return uctx, self.__dict__["_T"]

    def context_weights(self, normalization="sum"):
        """Per distinct context: row count (``"sum"``) or summed 1/K_s (``"per_token"``)."""
        uctx, inverse = self._grouping
        if normalization == "sum":
            w = np.ones(len(self))
        elif normalization == "per_token":
            w = self._row_weights
        else:
            raise ValidationError(f"unknown KL normalization {normalization!r}")
        return np.bincount(inverse.reshape(-1), weights=w, minlength=uctx.shape[0])


def _features(params, contexts):
    C, E = params.embed.shape
    return params.embed[contexts].reshape(contexts.shape[0], -1)


def forward(params, contexts):
    """Logits for one context of W tokens (shape (C,)) or for a stack (N, W) -> (N, C)."""
    contexts = check_tokens(contexts, params.embed.shape[0], "context")
    single = contexts.ndim == 1
    ctx = np.atleast_2d(contexts)
    if ctx.shape[1] != params.dims.context_window:
        raise ValidationError(f"context must have {params.dims.context_window} tokens")
    logits = _features(params, ctx) @ params.decode + params.bias
    return logits[0] if single else logits


def predict_proba(params, contexts):
    return losses.softmax(forward(params, contexts))


def _backward(params, contexts, X, G):
    """Chain a logit gradient (N, C) back to the flat parameter gradient."""
    C, E = params.embed.shape
    d_decode = X.T @ G
    d_bias = G.sum(axis=0)
    dX = (G @ params.decode.T).reshape(contexts.shape[0], contexts.shape[1], E)
    slots = (contexts.reshape(-1, 1) * E + np.arange(E)).ravel()
    d_embed = np.bincount(slots, weights=dX.ravel(), minlength=C * E)
    return np.concatenate([d_embed, d_decode.ravel(), d_bias])


def loss_and_grad(
    params,
    batch,
    objective,
    eps=losses.DEFAULT_EPSILON,
    ref_params=None,
    kl_normalization="sum",
    ref_log_probs=None,
):
    """Objective value and its full-batch gradient over the flattened parameters.

    Parameters
    ----------
    objective : {"fgt-uce", "fgt-ga-ce", "rt-ce", "kl"}
        Per-sequence token means summed over sequences for the first three;
        ``"kl"`` is KL(reference || current) on the batch positions and needs
        ``ref_params`` (or ``ref_log_probs`` from :func:`reference_log_probs`).

    Returns
    -------
    (float, ndarray of shape (n_params,))
    """
    if objective not in OBJECTIVES:
        raise ValidationError(f"unknown objective {objective!r}")
    if len(batch) == 0:
        raise ValidationError("batch is empty")
    ctx, T = batch.compressed()
    X = _features(params, ctx)
    z = X @ params.decode + params.bias
    logp = losses.log_softmax(z)
    p = np.exp(logp)

    if objective == "rt-ce":
        value = float(-np.sum(T * logp))
        G = T.sum(axis=1)[:, None] * p - T
    elif objective == "fgt-ga-ce":
        value = float(np.sum(T * logp))
        G = T - T.sum(axis=1)[:, None] * p
    elif objective == "fgt-uce":
        eps = check_epsilon(eps)
        value = float(np.sum(T * losses.uce_terms(p, eps)))
        A = T * losses.uce_dloss_dpt(p, eps) * p
        G = A - A.sum(axis=1)[:, None] * p
    else:
        if ref_log_probs is None:
            if ref_params is None:
                raise ValidationError("KL objective needs reference parameters")
            ref_log_probs = reference_log_probs(ref_params, batch, params.dims)
        k = batch.context_weights(kl_normalization)
        ref_p = np.exp(ref_log_probs)
        value = float(np.sum(k * np.sum(ref_p * (ref_log_probs - logp), axis=1)))
        G = k[:, None] * (p - ref_p)
    return value, _backward(params, ctx, X, G)


def reference_log_probs(ref_params, batch, dims=None):
    """Reference-model log-probabilities on the batch's distinct contexts."""
    if dims is not None and ref_params.dims != dims:
        raise ValidationError(f"reference dims {ref_params.dims} differ from model dims {dims}")
    ctx, _ = batch.compressed()
    return losses.log_softmax(forward(ref_params, ctx))


def objective_value(params, batch, objective, **kwargs):
    return loss_and_grad(params, batch, objective, **kwargs)[0]


def mean_token_ce(params, batch):
    """Mean per-token cross-entropy in nats."""
    logp = losses.log_softmax(forward(params, batch.contexts))
    return float(-logp[np.arange(len(batch)), batch.targets].mean())


def perplexity_fluency(params, batch):
    """``2 ** loss`` with the mean per-token cross-entropy measured in bits."""
    if len(batch) == 0:
        raise ValidationError("batch is empty")
    return float(2.0 ** (mean_token_ce(params, batch) / np.log(2.0)))


def mean_target_probability(params, batch):
    p = predict_proba(params, batch.contexts)
    return float(p[np.arange(len(batch)), batch.targets].mean())


def checkpoint_to_dict(params, seed=None, lineage=()):
    return {
        "format": CHECKPOINT_FORMAT,
        "format_version": CHECKPOINT_VERSION,
        "dims": params.dims.as_dict(),
        "seed": seed,
        "lineage": list(lineage),
        "params": flatten(params).tolist(),
    }


def checkpoint_from_dict(doc):
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValidationError("not a model checkpoint document")
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise ValidationError(f"unsupported checkpoint version {doc.get('format_version')}")
    return unflatten(np.array(doc["params"], dtype=np.float64), Dims(**doc["dims"]))


def save_checkpoint(path, params, seed=None, lineage=()):
    Path(path).write_text(json.dumps(checkpoint_to_dict(params, seed, lineage)) + "\n")


def load_checkpoint(path):
    """Return ``(params, document)``."""
    doc = json.loads(Path(path).read_text())
    return checkpoint_from_dict(doc), doc
