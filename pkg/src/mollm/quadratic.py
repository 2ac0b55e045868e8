"""Closed-form convex quadratic objectives for checking common-descent convergence."""

from dataclasses import dataclass, field

import numpy as np

from .exceptions import ValidationError
from .geometry import GradientSet, common_descent_direction, pareto_stationarity_measure


@dataclass(frozen=True)
class ConvexQuadraticProblem:
    """Objectives ``f_i(x) = 0.5 (x - c_i)^T H_i (x - c_i)`` with SPD ``H_i``.

    With identity curvatures the Pareto set is the segment (or hull) spanned
    by the centers, and the min-norm residual at ``x`` is its distance to it.
    """

    centers: np.ndarray
    curvatures: np.ndarray = None

    def __post_init__(self):
        c = np.atleast_2d(np.asarray(self.centers, dtype=np.float64))
        m, n = c.shape
        H = np.broadcast_to(np.eye(n), (m, n, n)).copy() if self.curvatures is None else np.asarray(self.curvatures, dtype=np.float64)
        if H.shape != (m, n, n):
            raise ValidationError(f"curvatures must have shape {(m, n, n)}, got {H.shape}")
        for h in H:
            if not np.allclose(h, h.T) or np.linalg.eigvalsh(h).min() <= 0:
                raise ValidationError("curvatures must be symmetric positive definite")
        object.__setattr__(self, "centers", c)
        object.__setattr__(self, "curvatures", H)

    @property
    def m(self):
        return self.centers.shape[0]

    def values(self, x):
        r = np.asarray(x, dtype=np.float64) - self.centers
        return 0.5 * np.einsum("ij,ijk,ik->i", r, self.curvatures, r)

    def gradients(self, x):
        r = np.asarray(x, dtype=np.float64) - self.centers
        return GradientSet(np.einsum("ijk,ik->ij", self.curvatures, r))


@dataclass
class DescentTrace:
    x: np.ndarray
    residuals: list = field(default_factory=list)
    rounds: int = 0


# shipped instance: two isotropic bowls centered at (0, 0) and (1, 0)
DEFAULT_QUADRATIC = ConvexQuadraticProblem(np.array([[0.0, 0.0], [1.0, 0.0]]))
DEFAULT_START = np.array([0.5, 2.0])


def run_common_descent(problem=DEFAULT_QUADRATIC, x0=DEFAULT_START, lr0=0.01, lr_decay=0.999, rounds=10_000, tol=0.0):
    """Iterate ``x <- x + lr0 * lr_decay**t * d_t`` with the dual-space direction.

    ``residuals[t]`` is the min-norm residual at the iterate before round
    ``t``; the final entry is measured at the returned point. Stops early
    once a residual is at most ``tol`` or the direction is stationary.
    """
    x = np.array(x0, dtype=np.float64)
    trace = DescentTrace(x)
    for t in range(rounds):
        g = problem.gradients(x)
        trace.residuals.append(pareto_stationarity_measure(g).residual_norm)
        if trace.residuals[-1] <= tol:
            break
        res = common_descent_direction(g)
        if res.stationary:
            break
        x = x + lr0 * lr_decay**t * res.direction
        trace.rounds = t + 1
    else:
        trace.residuals.append(pareto_stationarity_measure(problem.gradients(x)).residual_norm)
    trace.x = x
    return trace
