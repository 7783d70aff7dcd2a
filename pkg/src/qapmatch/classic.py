"""Learning-free matching solvers on the Lawler affinity matrix.

Both solvers relax the assignment constraint, iterate on the flattened
correspondence vector, and leave discretization to the Hungarian step.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .affinity import unvec_assignment
from .numerics import ConvergenceError, SparseMatrix, hungarian, sinkhorn

DEFAULT_JUMP = 0.2
DEFAULT_INFLATION = 30.0


@dataclass(frozen=True)
class RelaxedSolution:
    """Continuous correspondence scores plus iteration diagnostics."""

    scores: np.ndarray
    iterations: int
    residual: float


def _check_affinity(k: SparseMatrix, n1: int, n2: int) -> None:
    if k.shape[0] != n1 * n2 or k.shape[0] != k.shape[1]:
        raise ValueError("affinity matrix size does not match n1 * n2")
    if np.any(k.vals < 0):
        raise ValueError("affinity values must be nonnegative")


def spectral_match(
    k: SparseMatrix,
    n1: int,
    n2: int,
    max_iter: int = 1000,
    tol: float = 1e-8,
) -> RelaxedSolution:
    """Principal eigenvector of the affinity matrix by power iteration.

    Starts from the all-ones vector, normalizes to unit L2 length each step,
    and stops when successive iterates differ by less than tol.  The
    entrywise absolute value is taken before reshaping so the sign of the
    converged eigenvector cannot flip scores negative.
    """
    _check_affinity(k, n1, n2)
    size = k.shape[0]
    x = np.ones(size) / np.sqrt(size)
    for it in range(1, max_iter + 1):
        y = k.matvec(x)
        norm = np.linalg.norm(y)
        if norm == 0.0:
            raise ValueError("affinity matrix maps the iterate to zero")
        y /= norm
        resid = float(np.linalg.norm(y - x))
        x = y
        if resid < tol:
            return RelaxedSolution(
                scores=unvec_assignment(np.abs(x), n1, n2),
                iterations=it,
                residual=resid,
            )
    raise ConvergenceError(
        f"power iteration did not converge in {max_iter} iterations "
        f"(last residual {resid:.3e})"
    )


def rrwm(
    k: SparseMatrix,
    n1: int,
    n2: int,
    jump_prob: float = DEFAULT_JUMP,
    inflation: float = DEFAULT_INFLATION,
    max_iter: int = 300,
    tol: float = 1e-6,
    sinkhorn_iters: int = 10,
) -> RelaxedSolution:
    """Random walk on the association graph with a reweighted jump.

    Each step takes the affinity-weighted walk x <- K x (L1-normalized) and
    mixes in a jump distribution built from the current iterate: scores are
    exponentiated with the given inflation after scaling by their maximum,
    pushed toward a doubly stochastic matrix with a few Sinkhorn sweeps,
    and L1-normalized.  jump_prob = 0 reduces to the plain power walk.
    Non-convergence only warns; the last iterate is still returned.
    """
    _check_affinity(k, n1, n2)
    if not 0.0 <= jump_prob <= 1.0:
        raise ValueError("jump_prob must lie in [0, 1]")
    size = k.shape[0]
    x = np.ones(size) / size
    resid = np.inf
    for it in range(1, max_iter + 1):
        y = k.matvec(x)
        total = y.sum()
        if total <= 0.0:
            raise ValueError("walk left the support of the affinity matrix")
        y /= total
        if jump_prob > 0.0:
            m = y.max()
            if m <= 0.0:
                raise ValueError("iterate collapsed to zero")
            inflated = np.exp(inflation * (y / m))
            ds = sinkhorn(
                unvec_assignment(inflated, n1, n2), max_iter=sinkhorn_iters
            ).valid()
            jump = ds.T.reshape(-1)
            jump = jump / jump.sum()
            y = (1.0 - jump_prob) * y + jump_prob * jump
        resid = float(np.abs(y - x).sum())
        x = y
        if resid < tol:
            return RelaxedSolution(
                scores=unvec_assignment(x, n1, n2), iterations=it, residual=resid
            )
    warnings.warn(
        f"random walk stopped after {max_iter} iterations with residual "
        f"{resid:.3e} above tol {tol:.1e}",
        RuntimeWarning,
        stacklevel=2,
    )
    return RelaxedSolution(
        scores=unvec_assignment(x, n1, n2), iterations=max_iter, residual=resid
    )


def discretize(scores: np.ndarray) -> np.ndarray:
    """Binary assignment maximizing the total score (Hungarian)."""
    return hungarian(scores)
