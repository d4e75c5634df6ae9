"""Nonnegative elastic-net sparse coding.

Solves, column by column,

    min_{a >= 0}  1/2 ||x - D a||^2 + lambda1 * sum(a) + lambda2/2 ||a||^2

with accelerated proximal gradient (FISTA) and nonnegative soft-thresholding,
then optionally refines each code by solving the linear system on its active
set exactly; codes whose support FISTA got wrong are re-solved exactly as a
nonnegative least-squares problem. The active-set Cholesky factors are exposed so the backward pass
can reuse them.
"""

from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import cholesky, solve_triangular
from scipy.optimize import nnls

from . import linalg
from .exceptions import ContractViolation, NumericalError


@dataclass(frozen=True)
class ElasticNetParams:
    lambda1: float
    lambda2: float = 0.01
    max_iter: int = 50
    rel_tol: float = 1e-4
    refine: bool = True

    def __post_init__(self):
        if not self.lambda1 > 0:
            raise ContractViolation(f"lambda1 must be positive, got {self.lambda1}")
        if not self.lambda2 > 0:
            raise ContractViolation(f"lambda2 must be positive, got {self.lambda2}")
        if self.max_iter < 1:
            raise ContractViolation("max_iter must be at least 1")
        if not self.rel_tol > 0:
            raise ContractViolation("rel_tol must be positive")

    def with_lambda1(self, lambda1):
        return replace(self, lambda1=float(lambda1))


# Stopping rules: the training setting and the tight setting used when
# analytic gradients are compared against finite differences.
TRAIN_SOLVER = dict(max_iter=50, rel_tol=1e-4)
TIGHT_SOLVER = dict(max_iter=2000, rel_tol=1e-12)


@dataclass
class SparseCode:
    alpha: np.ndarray
    active_set: np.ndarray
    objective: float
    iterations: int = 0
    history: list = None


def objective(D, x, alpha, lambda1, lambda2):
    r = x - D @ alpha
    return 0.5 * float(r @ r) + lambda1 * float(alpha.sum()) + 0.5 * lambda2 * float(alpha @ alpha)


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericalError("non-finite values passed to the sparse solver")


def fista_batch(D, X, p, kappa=None, gram=None, DtX=None, return_iterations=False):
    """Run nonnegative FISTA on every column of ``X`` at once.

    Each column stops on its own relative-change rule (its iteration count
    matches a standalone solve); finished columns are compacted out of the
    working set in batches.

    Returns the code matrix of shape ``(n, P)``.
    """
    _check_finite(D, X)
    n = D.shape[1]
    G = D.T @ D if gram is None else gram
    if kappa is None:
        kappa = linalg.dominant_eigenvalue(D, p.lambda2, gram=G)
    if DtX is None:
        DtX = D.T @ X
    P = DtX.shape[1]

    step = np.eye(n) - (G + p.lambda2 * np.eye(n)) / kappa
    offset = (DtX - p.lambda1) / kappa

    codes = np.zeros((n, P))
    iterations = np.full(P, p.max_iter, dtype=np.int64)
    live = np.arange(P)
    pending = np.ones(P, dtype=bool)  # columns of the working set not yet finished
    alpha = np.zeros((n, P))
    gamma = np.zeros((n, P))
    alpha_sq = np.zeros(P)
    s = 1.0
    for t in range(p.max_iter):
        new = step @ gamma
        new += offset
        np.maximum(new, 0.0, out=new)
        s_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * s * s))
        delta = new - alpha
        gamma = new + ((s - 1.0) / s_next) * delta
        s = s_next
        change = np.sqrt(np.einsum("ij,ij->j", delta, delta))
        scale = np.maximum(1.0, np.sqrt(alpha_sq))
        alpha = new
        alpha_sq = np.einsum("ij,ij->j", alpha, alpha)
        done = (change <= p.rel_tol * scale) & pending
        if done.any():
            codes[:, live[done]] = alpha[:, done]
            iterations[live[done]] = t + 1
            pending &= ~done
            left = np.count_nonzero(pending)
            if left == 0:
                break
            # finished columns keep iterating harmlessly until enough accumulate
            if left <= 0.75 * pending.size:
                live, alpha, gamma = live[pending], alpha[:, pending], gamma[:, pending]
                offset, alpha_sq = offset[:, pending], alpha_sq[pending]
                pending = np.ones(left, dtype=bool)
    else:
        codes[:, live[pending]] = alpha[:, pending]
    if return_iterations:
        return codes, iterations
    return codes


def kkt_residuals(G, DtX, A, lambda1, lambda2):
    """Per-column optimality violation given ``G = D^T D`` and ``D^T X``."""
    grad = G @ A - DtX + lambda2 * A
    active = A > 0
    viol = np.where(active, np.abs(grad + lambda1), np.maximum(0.0, -lambda1 - grad))
    if viol.shape[0] == 0:
        return np.zeros(A.shape[1])
    return viol.max(axis=0)


def check_kkt(D, x, p, alpha):
    """Largest stationarity / complementarity violation of a nonnegative code."""
    alpha = np.asarray(alpha, dtype=np.float64)
    if np.any(alpha < 0):
        raise ContractViolation("check_kkt expects a nonnegative code")
    res = kkt_residuals(D.T @ D, (D.T @ x)[:, None], alpha[:, None], p.lambda1, p.lambda2)
    return float(res[0])


def active_set_closed_form(D, Lambda, x, p):
    """Solve ``(D_L^T D_L + lambda2 I) a = D_L^T x - lambda1`` on index set ``Lambda``."""
    Lambda = np.asarray(Lambda, dtype=np.int64)
    if Lambda.size == 0:
        raise ContractViolation("active set is empty; the code is identically zero")
    if len(set(Lambda.tolist())) != Lambda.size or Lambda.min() < 0 or Lambda.max() >= D.shape[1]:
        raise ContractViolation(f"invalid active set {Lambda.tolist()}")
    DL = D[:, Lambda]
    G = DL.T @ DL + p.lambda2 * np.eye(Lambda.size)
    return linalg.spd_solve(G, DL.T @ x - p.lambda1)


@dataclass
class ActiveSetGroup:
    """All columns whose active set has the same cardinality ``size``."""
    size: int
    columns: np.ndarray      # (P_s,)
    atoms: np.ndarray        # (P_s, size), sorted atom indices per column
    factors: np.ndarray      # (P_s, size, size) lower Cholesky factors


def factor_active_sets(G, lambda2, mask):
    """Cholesky-factor ``G_L + lambda2 I`` for every column's active set.

    ``mask`` is the boolean ``(n, P)`` support. Columns are grouped by
    cardinality so each group is one batched factorization.
    """
    counts = mask.sum(axis=0)
    groups = []
    for size in np.unique(counts):
        if size == 0:
            continue
        cols = np.flatnonzero(counts == size)
        atoms = np.nonzero(mask[:, cols].T)[1].reshape(cols.size, size)
        sub = G[atoms[:, :, None], atoms[:, None, :]]
        sub += lambda2 * np.eye(size)
        groups.append(ActiveSetGroup(int(size), cols, atoms, linalg.cholesky_batched(sub)))
    return groups


def solve_on_active_sets(groups, rhs):
    """Return ``z`` with ``z_L = (G_L + lambda2 I)^{-1} rhs_L`` and zeros elsewhere."""
    out = np.zeros_like(rhs)
    for g in groups:
        cols = g.columns[:, None]
        out[g.atoms, cols] = linalg.cho_solve_batched(g.factors, rhs[g.atoms, cols])
    return out


def refine_codes(G, DtX, A, p, groups=None):
    """Replace FISTA codes by the exact active-set solution where it is valid.

    A column is refined only if the closed-form values on its support are
    all strictly positive and its KKT residual does not get worse; the
    support therefore never changes. Returns ``(codes, groups, refined)``.
    """
    mask = A > 0
    if groups is None:
        groups = factor_active_sets(G, p.lambda2, mask)
    exact = solve_on_active_sets(groups, np.where(mask, DtX - p.lambda1, 0.0))
    feasible = np.all((exact > 0) == mask, axis=0)
    before = kkt_residuals(G, DtX, A, p.lambda1, p.lambda2)
    after = kkt_residuals(G, DtX, exact, p.lambda1, p.lambda2)
    take = feasible & (after <= before)
    out = np.where(take[None, :], exact, A)
    return out, groups, take


POLISH_TOL = 1e-8


def polish_codes(G, DtX, A, p, tol=POLISH_TOL, rounds=10):
    """Re-solve exactly every column whose KKT residual still exceeds ``tol``.

    First a few batched primal-dual active-set rounds warm-started from
    ``A`` (support ``{j : a_j - grad_j > 0}``, closed form on it). Columns
    still inexact are solved as the nonnegative least squares
    ``min ||R a - R^{-T} (D^T x - lambda1)||`` with ``G + lambda2 I = R^T R``.
    Returns ``(codes, polished_column_indices)``.
    """
    bad = np.flatnonzero(kkt_residuals(G, DtX, A, p.lambda1, p.lambda2) > tol)
    if bad.size == 0:
        return A, bad
    A = A.copy()
    todo = bad
    c = DtX[:, todo] - p.lambda1
    sub = A[:, todo]
    for _ in range(rounds):
        grad = G @ sub + p.lambda2 * sub - c
        mask = sub - grad > 0
        sub = solve_on_active_sets(factor_active_sets(G, p.lambda2, mask), np.where(mask, c, 0.0))
        exact = np.all(sub >= 0, axis=0)
        exact[exact] = kkt_residuals(G, c[:, exact] + p.lambda1, sub[:, exact],
                                     p.lambda1, p.lambda2) <= tol
        A[:, todo[exact]] = sub[:, exact]
        todo, c, sub = todo[~exact], c[:, ~exact], sub[:, ~exact]
        if todo.size == 0:
            return A, bad
    n = G.shape[0]
    R = cholesky(G + p.lambda2 * np.eye(n), lower=False)
    C = solve_triangular(R, c, trans="T")
    for k, j in enumerate(todo):
        try:
            A[:, j] = nnls(R, C[:, k], maxiter=50 * n)[0]
        except RuntimeError:  # iteration cap hit; keep the FISTA code
            pass
    A[:, todo], _, _ = refine_codes(G, DtX[:, todo], A[:, todo], p)
    return A, bad


def finish_codes(G, DtX, A, p):
    """Refine and polish FISTA codes (if ``p.refine``) and factor their active sets.

    Returns ``(codes, groups)``.
    """
    groups = factor_active_sets(G, p.lambda2, A > 0)
    if p.refine:
        A, groups, _ = refine_codes(G, DtX, A, p, groups)
        A, polished = polish_codes(G, DtX, A, p)
        if polished.size:
            groups = factor_active_sets(G, p.lambda2, A > 0)
    return A, groups


def solve_batch(D, X, p, kappa=None, gram=None):
    """FISTA plus optional refinement and polishing on all columns of ``X``.

    Returns ``(codes, groups)`` where ``groups`` holds the active-set
    factorizations of the returned codes.
    """
    G = D.T @ D if gram is None else gram
    DtX = D.T @ X
    A = fista_batch(D, X, p, kappa=kappa, gram=G, DtX=DtX)
    return finish_codes(G, DtX, A, p)


SOLVERS = {"fista": solve_batch}


def fista_nonneg(D, x, p, kappa=None, history=False):
    """Solve a single nonnegative elastic-net problem.

    With ``history=True`` the objective of every FISTA iterate (before any
    refinement) is recorded.
    """
    D = np.asarray(D, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if D.ndim != 2 or x.shape != (D.shape[0],):
        raise ContractViolation(f"shape mismatch: D {D.shape}, x {x.shape}")
    _check_finite(D, x)
    trace = None
    if history:
        trace = _fista_trace(D, x, p, kappa)
    G = D.T @ D
    DtX = (D.T @ x)[:, None]
    A, iters = fista_batch(D, x[:, None], p, kappa=kappa, gram=G, DtX=DtX,
                           return_iterations=True)
    A, _ = finish_codes(G, DtX, A, p)
    alpha = A[:, 0]
    return SparseCode(alpha=alpha, active_set=np.flatnonzero(alpha > 0),
                      objective=objective(D, x, alpha, p.lambda1, p.lambda2),
                      iterations=int(iters[0]), history=trace)


def _fista_trace(D, x, p, kappa):
    # unvectorized transcription, kept for diagnostics and monotonicity tests
    n = D.shape[1]
    G = D.T @ D
    if kappa is None:
        kappa = linalg.dominant_eigenvalue(D, p.lambda2, gram=G)
    step = np.eye(n) - (G + p.lambda2 * np.eye(n)) / kappa
    offset = (D.T @ x - p.lambda1) / kappa
    alpha = np.zeros(n)
    gamma = np.zeros(n)
    s = 1.0
    out = []
    for _ in range(p.max_iter):
        new = np.maximum(step @ gamma + offset, 0.0)
        s_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * s * s))
        gamma = new + ((s - 1.0) / s_next) * (new - alpha)
        done = np.linalg.norm(new - alpha) <= p.rel_tol * max(1.0, np.linalg.norm(alpha))
        alpha, s = new, s_next
        out.append(objective(D, x, alpha, p.lambda1, p.lambda2))
        if done:
            break
    return out
