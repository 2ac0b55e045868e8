"""scikit-learn style wrappers around the toy model and the unlearning loop.

``X`` is always an integer array of token sequences with shape
``(n_sequences, sequence_length)``. For :class:`Unlearner`, ``y`` is the
boolean forget mask.
"""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from . import engine
from .corpus import Corpus
from .exceptions import ValidationError
from .model import Dims, ModelParams, TokenBatch, init_model, mean_token_ce, perplexity_fluency, predict_proba


def _check_sequences(X, vocab_size):
    X = check_array(X, dtype=np.int64, ensure_min_samples=1, ensure_min_features=2)
    if X.min() < 0 or X.max() >= vocab_size:
        raise ValidationError(f"tokens out of range [0, {vocab_size})")
    return X


def _params_of(reference):
    if isinstance(reference, ModelParams):
        return reference
    check_is_fitted(reference, "params_")
    return reference.params_


class NextTokenModel(BaseEstimator):
    """Embedding plus linear decoder predicting each token from the previous ``context_window``.

    Parameters
    ----------
    vocab_size : int
    embed_dim : int
    context_window : int
    epochs : int
        Full-batch gradient-descent steps (fewer if the loss plateaus).
    lr : float
    random_state : int
        Seed for the uniform initialization.
    """

    def __init__(self, vocab_size=32, embed_dim=8, context_window=2, epochs=500, lr=5.0, random_state=0):
        self.vocab_size = vocab_size
        self.embed_dim = embed_dim
        self.context_window = context_window
        self.epochs = epochs
        self.lr = lr
        self.random_state = random_state

    def fit(self, X, y=None):
        X = _check_sequences(X, self.vocab_size)
        dims = Dims(self.vocab_size, self.embed_dim, self.context_window)
        corpus = Corpus(X, np.zeros(len(X), dtype=bool), self.vocab_size)
        history = []
        self.params_ = engine.pretrain(init_model(dims, self.random_state), corpus, self.epochs, self.lr, history=history)
        self.loss_curve_ = history
        return self

    def _contexts(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.int64, ensure_min_features=self.context_window)
        if X.min() < 0 or X.max() >= self.vocab_size:
            raise ValidationError(f"tokens out of range [0, {self.vocab_size})")
        return X[:, -self.context_window:]

    def predict_proba(self, X):
        """Next-token distribution after each row of ``X`` (only the last ``context_window`` tokens matter)."""
        contexts = self._contexts(X)
        return predict_proba(self.params_, contexts)

    def predict(self, X):
        return self.predict_proba(X).argmax(axis=1)

    def _batch(self, X):
        check_is_fitted(self, "params_")
        return TokenBatch.from_sequences(_check_sequences(X, self.vocab_size), self.context_window, self.vocab_size)

    def score(self, X, y=None):
        """Negative mean per-token cross-entropy (nats) over the sequences ``X``."""
        batch = self._batch(X)
        return -mean_token_ce(self.params_, batch)

    def fluency(self, X):
        batch = self._batch(X)
        return perplexity_fluency(self.params_, batch)


class Unlearner(BaseEstimator):
    """Unlearn the sequences flagged by ``y`` from a reference model.

    ``fit(X, y, reference=...)`` runs one unlearning method starting from
    ``reference`` (a fitted :class:`NextTokenModel` or ``ModelParams``).
    ``clip_norm="auto"`` uses the method default: 1.0 for the gradient-ascent
    methods and none otherwise. ``lr0=None`` likewise takes the method default.
    """

    def __init__(
        self,
        method="mollm",
        epsilon=0.01,
        lr0=None,
        lr_decay=0.999,
        weights=(1.0, 1.0, 1.0),
        clip_norm="auto",
        rounds=2000,
        random_state=0,
        kl_normalization="per_token",
    ):
        self.method = method
        self.epsilon = epsilon
        self.lr0 = lr0
        self.lr_decay = lr_decay
        self.weights = weights
        self.clip_norm = clip_norm
        self.rounds = rounds
        self.random_state = random_state
        self.kl_normalization = kl_normalization

    def _config(self):
        kw = dict(
            epsilon=self.epsilon,
            lr_decay=self.lr_decay,
            weights=tuple(self.weights),
            rounds=self.rounds,
            seed=self.random_state,
            kl_normalization=self.kl_normalization,
        )
        if self.lr0 is not None:
            kw["lr0"] = self.lr0
        if self.clip_norm != "auto":
            kw["clip_norm"] = self.clip_norm
        return engine.UnlearnConfig.for_method(self.method, **kw)

    def fit(self, X, y, reference):
        ref = _params_of(reference)
        X = _check_sequences(X, ref.dims.vocab_size)
        y = np.asarray(y, dtype=bool).reshape(-1)
        if y.shape[0] != X.shape[0]:
            raise ValidationError("y must hold one forget flag per sequence")
        config = self._config()
        corpus = Corpus(X, y, ref.dims.vocab_size)
        self.params_, self.records_ = engine.run_unlearning(ref, corpus, config)
        self.config_ = config
        self.reference_ = ref
        self.conflict_probabilities_ = engine.conflict_probabilities(self.records_)
        self.n_rounds_ = len(self.records_)
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "params_")
        W = self.params_.dims.context_window
        X = check_array(X, dtype=np.int64, ensure_min_features=W)
        return predict_proba(self.params_, X[:, -W:])
