"""Dense linear-algebra kernels used by the sparse solver and the backward pass.

Everything here is a pure function of its inputs. Matrices are plain
``numpy.ndarray`` objects; float64 is used throughout.
"""

import numpy as np
import scipy.linalg

from .exceptions import ContractViolation, NotPositiveDefinite

POWER_ITERATIONS = 30
EIGEN_SAFETY = 1.01


def matmul(A, B):
    """Matrix product with an explicit dimension check.

    Delegates to BLAS; with a fixed thread count and fixed shapes the
    summation order is fixed, so results are reproducible run to run.
    """
    A = np.asarray(A)
    B = np.asarray(B)
    if A.ndim != 2 or B.ndim != 2:
        raise ContractViolation(f"matmul expects 2-D operands, got {A.shape} and {B.shape}")
    if A.shape[1] != B.shape[0]:
        raise ContractViolation(f"matmul dimension mismatch: {A.shape} x {B.shape}")
    return A @ B


def cholesky(G):
    """Lower Cholesky factor of a symmetric positive-definite matrix."""
    try:
        return scipy.linalg.cholesky(G, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from None


def spd_solve(G, B):
    """Solve ``G X = B`` for symmetric positive-definite ``G``.

    Uses a Cholesky factorization followed by two triangular solves; ``G``
    is never inverted. ``B`` may be a vector or a matrix.
    """
    G = np.asarray(G, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if G.ndim != 2 or G.shape[0] != G.shape[1]:
        raise ContractViolation(f"spd_solve needs a square matrix, got {G.shape}")
    if B.shape[0] != G.shape[0]:
        raise ContractViolation(f"spd_solve right-hand side {B.shape} does not match {G.shape}")
    L = cholesky(G)
    if not np.all(np.diag(L) > 0):
        raise NotPositiveDefinite("zero pivot in Cholesky factor")
    Y = scipy.linalg.solve_triangular(L, B, lower=True, check_finite=False)
    return scipy.linalg.solve_triangular(L.T, Y, lower=False, check_finite=False)


def cholesky_batched(G):
    """Cholesky factors of a stack of SPD matrices with shape ``(P, s, s)``."""
    try:
        return np.linalg.cholesky(G)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from None


def cho_solve_batched(L, B):
    """Solve ``L L^T x_p = b_p`` for every ``p`` given stacked lower factors.

    ``L`` has shape ``(P, s, s)`` and ``B`` shape ``(P, s)``. The loops run
    over the (small) system size ``s``; every step is vectorized over ``P``.
    """
    P, s = B.shape
    y = np.empty_like(B)
    for i in range(s):
        acc = B[:, i]
        if i:
            acc = acc - np.einsum("pj,pj->p", L[:, i, :i], y[:, :i])
        y[:, i] = acc / L[:, i, i]
    x = np.empty_like(B)
    for i in range(s - 1, -1, -1):
        acc = y[:, i]
        if i < s - 1:
            acc = acc - np.einsum("pj,pj->p", L[:, i + 1:, i], x[:, i + 1:])
        x[:, i] = acc / L[:, i, i]
    return x


def dominant_eigenvalue(D, lambda2, n_iter=POWER_ITERATIONS, v0=None, rng=None,
                        safety=EIGEN_SAFETY, gram=None, return_vector=False):
    """Upper estimate of the largest eigenvalue of ``D^T D + lambda2 I``.

    Power iteration runs on ``D^T D`` alone and ``lambda2`` is added at the
    end, so the estimate shifts exactly with ``lambda2``. The Rayleigh
    quotient is inflated by ``safety`` to keep ``1/kappa`` a valid FISTA step.

    Parameters
    ----------
    D : (m, n) array
    lambda2 : float
    n_iter : int
        Number of power iterations.
    v0 : (n,) array, optional
        Warm-start vector, typically the eigenvector from the previous call.
    rng : numpy Generator, optional
        Used to draw a random unit start vector when ``v0`` is not given.
    gram : (n, n) array, optional
        Precomputed ``D^T D``.
    return_vector : bool
        Also return the final unit iterate (for warm starting).
    """
    D = np.asarray(D, dtype=np.float64)
    if D.size == 0:
        raise ContractViolation("dominant_eigenvalue needs a nonempty matrix")
    if lambda2 < 0:
        raise ContractViolation("lambda2 must be nonnegative")
    n = D.shape[1]
    G = D.T @ D if gram is None else gram
    if v0 is None or np.linalg.norm(v0) == 0:
        rng = np.random.default_rng(0) if rng is None else rng
        v = rng.standard_normal(n)
    else:
        v = np.array(v0, dtype=np.float64)
    v /= np.linalg.norm(v)

    if not np.any(G):
        return (float(lambda2), v) if return_vector else float(lambda2)

    rho = 0.0
    for _ in range(n_iter):
        w = G @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            # start vector landed in the null space; fall back to a trace bound
            rho = float(np.trace(G))
            break
        v = w / norm
        rho = float(v @ (G @ v))
    kappa = safety * rho + lambda2
    return (kappa, v) if return_vector else kappa
