"""Synthetic forget/retain corpora drawn from two related Markov chains."""

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .exceptions import ValidationError
from .model import TokenBatch

CORPUS_FORMAT = "mollm-corpus"
CORPUS_VERSION = 1
FORGET, RETAIN = "forget", "retain"


@dataclass(frozen=True)
class CorpusSpec:
    """Generator settings.

    Retain sequences follow chain ``A``. Forget sequences follow chain ``B``
    whose rows on the shared token subset are
    ``(1 - conflict_strength) * A + conflict_strength * A[:, perm]``; the
    remaining rows equal ``A``. ``peak`` is the probability mass ``A`` puts
    on each token's preferred successor.
    """

    vocab_size: int = 32
    n_sequences: int = 400
    sequence_length: int = 16
    forget_fraction: float = 0.25
    seed: int = 0
    conflict_strength: float = 0.7
    shared_fraction: float = 1.0
    peak: float = 0.99

    def __post_init__(self):
        if not 0.0 < self.forget_fraction < 1.0:
            raise ValidationError(f"forget_fraction must lie in (0, 1), got {self.forget_fraction}")
        if not 0.0 <= self.conflict_strength <= 1.0:
            raise ValidationError("conflict_strength must lie in [0, 1]")
        if not 0.0 < self.shared_fraction <= 1.0:
            raise ValidationError("shared_fraction must lie in (0, 1]")
        if not 0.0 <= self.peak <= 1.0:
            raise ValidationError("peak must lie in [0, 1]")
        if self.vocab_size < 2 or self.n_sequences < 2 or self.sequence_length < 2:
            raise ValidationError("vocab_size, n_sequences and sequence_length must be >= 2")
        n_fgt = int(round(self.forget_fraction * self.n_sequences))
        if n_fgt == 0 or n_fgt == self.n_sequences:
            raise ValidationError("forget fraction leaves one split empty")


@dataclass(frozen=True, eq=False)
class Corpus:
    sequences: np.ndarray  # (N, L) int
    forget_mask: np.ndarray  # (N,) bool
    vocab_size: int
    spec: CorpusSpec = None

    def __post_init__(self):
        seqs = np.asarray(self.sequences, dtype=np.int64)
        mask = np.asarray(self.forget_mask, dtype=bool)
        if seqs.ndim != 2 or mask.shape != (seqs.shape[0],):
            raise ValidationError("sequences must be (N, L) with one split label per sequence")
        if seqs.size and (seqs.min() < 0 or seqs.max() >= self.vocab_size):
            raise ValidationError("token out of vocabulary range")
        object.__setattr__(self, "sequences", seqs)
        object.__setattr__(self, "forget_mask", mask)

    @property
    def split_labels(self):
        return [FORGET if f else RETAIN for f in self.forget_mask]

    @property
    def forget_sequences(self):
        return self.sequences[self.forget_mask]

    @property
    def retain_sequences(self):
        return self.sequences[~self.forget_mask]

    def batch(self, split, context_window):
        """TokenBatch for ``"forget"``, ``"retain"`` or ``"all"`` sequences."""
        if split == FORGET:
            idx = np.flatnonzero(self.forget_mask)
        elif split == RETAIN:
            idx = np.flatnonzero(~self.forget_mask)
        elif split == "all":
            idx = np.arange(len(self.sequences))
        else:
            raise ValidationError(f"unknown split {split!r}")
        return TokenBatch.from_sequences(self.sequences[idx], context_window, self.vocab_size, seq_ids=idx)

    def checksum(self):
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.sequences, dtype="<i8").tobytes())
        h.update(np.ascontiguousarray(self.forget_mask, dtype=np.uint8).tobytes())
        h.update(str(self.vocab_size).encode())
        return h.hexdigest()

    def __eq__(self, other):
        if not isinstance(other, Corpus):
            return NotImplemented
        return (
            self.vocab_size == other.vocab_size
            and np.array_equal(self.sequences, other.sequences)
            and np.array_equal(self.forget_mask, other.forget_mask)
        )


def transition_matrices(spec):
    """Return ``(A, B, shared)`` for a generator spec."""
    rng = np.random.default_rng([spec.seed, 1])
    C = spec.vocab_size
    successor = rng.permutation(C)
    noise = rng.dirichlet(np.ones(C), size=C)
    A = (1.0 - spec.peak) * noise
    A[np.arange(C), successor] += spec.peak

    n_shared = max(1, int(round(spec.shared_fraction * C)))
    shared = np.sort(rng.choice(C, size=n_shared, replace=False))
    # derangement so every permuted row really moves its mass
    perm = rng.permutation(C)
    while np.any(perm == np.arange(C)):
        perm = rng.permutation(C)
    B = A.copy()
    c = spec.conflict_strength
    B[shared] = (1.0 - c) * A[shared] + c * A[shared][:, perm]
    return A, B, shared


def _sample_chain(rng, P, starts, length):
    C = P.shape[0]
    cdf = np.cumsum(P, axis=1)
    cdf[:, -1] = 1.0
    seqs = np.empty((len(starts), length), dtype=np.int64)
    seqs[:, 0] = starts
    for i in range(1, length):
        u = rng.random(len(starts))
        rows = cdf[seqs[:, i - 1]]
        seqs[:, i] = np.minimum((rows < u[:, None]).sum(axis=1), C - 1)
    return seqs


def generate_corpus(spec=None):
    """Sample a deterministic forget/retain corpus from ``spec``."""
    spec = spec or CorpusSpec()
    A, B, shared = transition_matrices(spec)
    rng = np.random.default_rng([spec.seed, 2])
    N = spec.n_sequences
    n_fgt = int(round(spec.forget_fraction * N))
    forget_mask = np.zeros(N, dtype=bool)
    forget_mask[rng.choice(N, size=n_fgt, replace=False)] = True

    seqs = np.empty((N, spec.sequence_length), dtype=np.int64)
    retain_starts = rng.integers(0, spec.vocab_size, size=N - n_fgt)
    forget_starts = rng.choice(shared, size=n_fgt)
    seqs[~forget_mask] = _sample_chain(rng, A, retain_starts, spec.sequence_length)
    seqs[forget_mask] = _sample_chain(rng, B, forget_starts, spec.sequence_length)
    return Corpus(seqs, forget_mask, spec.vocab_size, spec)


def corpus_to_dict(corpus):
    return {
        "format": CORPUS_FORMAT,
        "format_version": CORPUS_VERSION,
        "vocab_size": corpus.vocab_size,
        "generator": asdict(corpus.spec) if corpus.spec is not None else None,
        "checksum": corpus.checksum(),
        "split_labels": corpus.split_labels,
        "sequences": corpus.sequences.tolist(),
    }


def corpus_from_dict(doc):
    if doc.get("format") != CORPUS_FORMAT:
        raise ValidationError("not a corpus document")
    if doc.get("format_version") != CORPUS_VERSION:
        raise ValidationError(f"unsupported corpus version {doc.get('format_version')}")
    labels = doc["split_labels"]
    bad = set(labels) - {FORGET, RETAIN}
    if bad:
        raise ValidationError(f"unknown split labels {sorted(bad)}")
    spec = CorpusSpec(**doc["generator"]) if doc.get("generator") else None
    corpus = Corpus(np.array(doc["sequences"], dtype=np.int64), np.array([s == FORGET for s in labels]), doc["vocab_size"], spec)
    if doc.get("checksum") and doc["checksum"] != corpus.checksum():
        raise ValidationError("corpus checksum mismatch")
    return corpus


def save_corpus(path, corpus):
    Path(path).write_text(json.dumps(corpus_to_dict(corpus)) + "\n")


def load_corpus(path):
    return corpus_from_dict(json.loads(Path(path).read_text()))
