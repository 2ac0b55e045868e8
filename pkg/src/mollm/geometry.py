"""Gradient geometry for multi-objective descent.

Dual vectors are obtained by projecting each objective gradient onto the
null space of the remaining gradients. Averaging the negated dual vectors
gives a direction with a strictly negative inner product against every
(non-degenerate) gradient, i.e. a common descent direction.
"""

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
from scipy import linalg

from .exceptions import ValidationError
from .validation import check_matrix, check_vector

CANONICAL_LABELS = ("fgt", "KL", "rt")

# a row is dependent when its residual against kept rows is <= this * its norm
RANK_TOL = 1e-10
# a dual vector is degenerate when its norm is <= this * the gradient norm
DEGENERATE_TOL = 1e-10
# gradients with norm <= this * the largest norm are treated as inactive
NULL_TOL = 1e-12
# min-norm residual (relative to the largest gradient) certifying stationarity
STATIONARY_TOL = 1e-8
CONFLICT_TOL = 1e-9

FW_MAX_ITER = 10_000
FW_GAP_TOL = 1e-10


@dataclass(frozen=True)
class GradientSet:
    """Ordered per-objective gradients, stacked as the rows of ``gradients``."""

    gradients: np.ndarray
    labels: tuple = None

    def __post_init__(self):
        g = self.gradients
        if not isinstance(g, np.ndarray):
            try:
                g = [check_vector(v, "gradient") for v in g]
            except ValueError as exc:
                raise ValidationError(str(exc)) from exc
            if len({len(v) for v in g}) > 1:
                raise ValidationError("gradients have mismatched dimensions")
            g = np.vstack(g) if g else np.zeros((0, 0))
        g = np.array(g, dtype=np.float64)
        if g.ndim != 2 or g.shape[0] < 1 or g.shape[1] < 1:
            raise ValidationError(f"need at least one gradient of dimension >= 1, got shape {g.shape}")
        if not np.all(np.isfinite(g)):
            raise ValidationError("gradients contain NaN or Inf")
        g.setflags(write=False)
        object.__setattr__(self, "gradients", g)

        labels = self.labels
        if labels is None:
            labels = CANONICAL_LABELS if g.shape[0] == 3 else tuple(f"g{i}" for i in range(g.shape[0]))
        labels = tuple(str(s) for s in labels)
        if len(labels) != g.shape[0]:
            raise ValidationError("one label per gradient is required")
        object.__setattr__(self, "labels", labels)

    @property
    def m(self):
        return self.gradients.shape[0]

    @property
    def n(self):
        return self.gradients.shape[1]

    @property
    def norms(self):
        return np.linalg.norm(self.gradients, axis=1)

    def __len__(self):
        return self.m

    def __getitem__(self, i):
        return self.gradients[i]


@dataclass(frozen=True)
class DirectionResult:
    """An update direction together with its per-objective diagnostics.

    ``mode`` records how the direction was formed: ``"dual"`` for the
    averaged dual vectors, ``"min_norm"`` for the fallback used when every
    dual vector vanishes at a non-stationary point, ``"stationary"`` when the
    zero direction is returned.
    """

    direction: np.ndarray
    dual_norms: np.ndarray
    dot_products: np.ndarray
    degenerate_mask: np.ndarray
    stationary: bool
    scale_applied: float
    mode: str = "dual"
    raw_dot_products: np.ndarray = field(default=None, repr=False)


@dataclass(frozen=True)
class ParetoCertificate:
    """Simplex weights minimizing the norm of the weighted gradient sum."""

    weights: np.ndarray
    residual_norm: float


def _independent_rows(A):
    """Indices of a maximal linearly independent subset of rows, in order."""
    kept, basis = [], []
    for i, row in enumerate(A):
        norm = np.linalg.norm(row)
        if norm == 0.0:
            continue
        r = row.copy()
        # two passes of modified Gram-Schmidt
        for _ in range(2):
            for q in basis:
                r -= (q @ r) * q
        rnorm = np.linalg.norm(r)
        if rnorm <= RANK_TOL * norm:
            continue
        kept.append(i)
        basis.append(r / rnorm)
    return kept


def _remove_row_space(v, A):
    gram = A @ A.T
    try:
        factor = linalg.cho_factor(gram, check_finite=False)
        solve = lambda b: linalg.cho_solve(factor, b, check_finite=False)  # noqa: E731
        solve(A @ v)  # surfaces a failed factorization early
    except linalg.LinAlgError:
        solve = lambda b: linalg.lstsq(gram, b, check_finite=False)[0]  # noqa: E731
    out = v - A.T @ solve(A @ v)
    # one step of iterative refinement
    return out - A.T @ solve(A @ out)


def project_to_null_space(v, rows):
    """Project ``v`` onto the orthogonal complement of ``rows``.

    Computes ``v - A^T (A A^T)^{-1} A v`` where ``A`` stacks a maximal
    linearly independent subset of ``rows`` (selected in order), using a
    Cholesky solve instead of an explicit inverse.

    Parameters
    ----------
    v : array_like, shape (n,)
    rows : sequence of array_like or ndarray of shape (k, n)

    Returns
    -------
    ndarray, shape (n,)
    """
    v = check_vector(v, "v")
    A = check_matrix(rows, "rows", dim=v.shape[0])
    if A.shape[0] == 0:
        return v.copy()
    kept = _independent_rows(A)
    if not kept:
        return v.copy()
    return _remove_row_space(v, A[kept])


def dual_vectors(g):
    """Project every gradient onto the null space of the others."""
    G = g.gradients
    return np.vstack([project_to_null_space(G[i], np.delete(G, i, axis=0)) for i in range(g.m)])


def _active_mask(norms):
    top = norms.max()
    return norms > NULL_TOL * top if top > 0 else np.zeros_like(norms, dtype=bool)


def common_descent_direction(g):
    """Average of the negated dual vectors, rescaled to the smallest gradient norm.

    Gradients that are numerically zero impose no descent constraint: they
    are excluded from the projections and from the norm used for rescaling.
    If every dual vector vanishes the point is either Pareto stationary (zero
    direction) or the gradients are positively dependent, in which case the
    negated min-norm convex combination is used instead.

    Returns
    -------
    DirectionResult
    """
    G = g.gradients
    m = g.m
    norms = g.norms
    active = _active_mask(norms)

    duals = np.zeros_like(G)
    idx = np.flatnonzero(active)
    for i in idx:
        others = G[idx[idx != i]]
        duals[i] = project_to_null_space(G[i], others)
    dual_norms = np.linalg.norm(duals, axis=1)
    degenerate = ~active | (dual_norms <= DEGENERATE_TOL * norms)
    duals[degenerate] = 0.0
    dual_norms = np.where(degenerate, 0.0, dual_norms)

    zero = np.zeros(g.n)
    if not active.any():
        return DirectionResult(zero, dual_norms, np.zeros(m), degenerate, True, 1.0, "stationary", np.zeros(m))

    mode = "dual"
    raw = -duals.sum(axis=0) / m
    if degenerate.all():
        cert = pareto_stationarity_measure(GradientSet(G[active]))
        if cert.residual_norm <= STATIONARY_TOL * norms.max():
            return DirectionResult(zero, dual_norms, np.zeros(m), degenerate, True, 1.0, "stationary", np.zeros(m))
        raw = -(cert.weights @ G[active])
        mode = "min_norm"

    raw_dots = G @ raw
    target = norms[active].min()
    scale = target / np.linalg.norm(raw)
    direction = raw * scale
    return DirectionResult(
        direction=direction,
        dual_norms=dual_norms,
        dot_products=G @ direction,
        degenerate_mask=degenerate,
        stationary=False,
        scale_applied=float(scale),
        mode=mode,
        raw_dot_products=raw_dots,
    )


def _kkt_on_support(M, support):
    """Minimize w^T M w over {w >= 0, sum w = 1, supp(w) in support} ignoring the sign constraint."""
    k = len(support)
    K = np.zeros((k + 1, k + 1))
    K[:k, :k] = 2.0 * M[np.ix_(support, support)]
    K[:k, k] = 1.0
    K[k, :k] = 1.0
    rhs = np.zeros(k + 1)
    rhs[k] = 1.0
    sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
    w = np.zeros(M.shape[0])
    w[support] = sol[:k]
    return w


def _polish(M, support, gap, gap_tol, max_support=8):
    """Optimal point on some face of ``support`` certified by the FW gap, if any."""
    if len(support) > max_support:
        return None
    best = None
    for size in range(1, len(support) + 1):
        for face in combinations(support, size):
            cand = _kkt_on_support(M, list(face))
            if np.any(cand < 0.0) or abs(cand.sum() - 1.0) > 1e-9:
                continue
            if gap(cand) <= gap_tol and (best is None or cand @ M @ cand < best @ M @ best):
                best = cand
    return best


def min_norm_weights(M, max_iter=FW_MAX_ITER, gap_tol=FW_GAP_TOL):
    """Minimize ``w^T M w`` over the probability simplex for a Gram matrix ``M``.

    Closed form for one or two objectives; Frank-Wolfe with exact line search
    otherwise. Every 25 iterations the faces of the current support are
    polished by solving the equality-constrained problem on each, which
    terminates FW once the optimal face has been identified. The duality gap is measured
    relative to the largest diagonal entry of ``M``.
    """
    M = np.asarray(M, dtype=np.float64)
    m = M.shape[0]
    if m == 1:
        return np.ones(1)
    if m == 2:
        denom = M[0, 0] - 2.0 * M[0, 1] + M[1, 1]
        if denom <= 0.0:
            return np.array([0.5, 0.5])
        gamma = float(np.clip((M[1, 1] - M[0, 1]) / denom, 0.0, 1.0))
        return np.array([gamma, 1.0 - gamma])

    scale = M.diagonal().max()
    if scale <= 0.0:
        return np.full(m, 1.0 / m)
    M = M / scale

    def gap(w):
        Mw = M @ w
        return 2.0 * (w @ Mw - Mw.min())

    w = np.zeros(m)
    w[np.argmin(M.diagonal())] = 1.0
    for it in range(max_iter):
        Mw = M @ w
        s = int(np.argmin(Mw))
        a = w @ Mw
        b = Mw[s]
        if 2.0 * (a - b) <= gap_tol:
            break
        denom = a - 2.0 * b + M[s, s]
        gamma = 1.0 if denom <= 0.0 else min(max((a - b) / denom, 0.0), 1.0)
        w *= 1.0 - gamma
        w[s] += gamma
        if it % 25 == 24:
            cand = _polish(M, np.flatnonzero(w > 0.0), gap, gap_tol)
            if cand is not None:
                w = cand
                break
    w = np.clip(w, 0.0, None)
    return w / w.sum()


def pareto_stationarity_measure(g):
    """Min-norm element of the convex hull of the gradients.

    A zero residual certifies Pareto stationarity: some convex combination of
    the objective gradients vanishes.
    """
    G = g.gradients
    w = min_norm_weights(G @ G.T)
    return ParetoCertificate(weights=w, residual_norm=float(np.linalg.norm(w @ G)))


def conflict_flags(d, g, tol=CONFLICT_TOL):
    """Flag objectives whose gradient has a strictly positive inner product with ``d``.

    Orthogonal directions (zero inner product up to ``tol`` relative) do not
    count as conflicts.
    """
    d = check_vector(d, "d", dim=g.n)
    dots = g.gradients @ d
    bound = tol * np.linalg.norm(d) * g.norms
    return dots > bound
