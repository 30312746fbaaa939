"""Small dense kernels: matrix exponential, ZOH discretization, CARE, box QP.

Everything here is a pure function of numpy arrays and sized for the
n <= ~60 problems the controllers produce.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import factorial

import numpy as np

from .errors import DimensionError, InfeasibleError, SolverFailure

# Pade(6, 6) numerator coefficients; the denominator uses alternating signs.
_PADE6 = np.array(
    [factorial(12 - k) * factorial(6) / (factorial(12) * factorial(k) * factorial(6 - k)) for k in range(7)]
)


def _square(A, name="A"):
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DimensionError(f"{name} must be square, got shape {A.shape}")
    return A


def expm(A, t: float = 1.0) -> np.ndarray:
    """Return ``exp(A t)`` by scaling and squaring with a degree-6 Pade kernel."""
    A = _square(A)
    if t < 0:
        raise ValueError("t must be nonnegative")
    M = A * t
    n = M.shape[0]
    norm = np.linalg.norm(M, 1)
    s = 0
    if norm > 0.5:
        s = int(np.ceil(np.log2(norm / 0.5)))
    M = M / 2.0**s
    N = np.zeros_like(M)
    D = np.zeros_like(M)
    P = np.eye(n)
    for k, c in enumerate(_PADE6):
        N += c * P
        D += (-1) ** k * c * P
        P = P @ M
    E = np.linalg.solve(D, N)
    for _ in range(s):
        E = E @ E
    return E


def discretize_pair(A, B, c, delta: float):
    """Zero-order-hold discretization of ``xdot = A x + B v + c``.

    Uses one exponential of the augmented matrix ``delta * [[A, I], [0, 0]]``;
    its upper-right block is ``int_0^delta exp(A s) ds``.

    Returns
    -------
    (A_d, B_d, c_d)
    """
    A = _square(A)
    n = A.shape[0]
    B = np.atleast_2d(np.asarray(B, dtype=float)) if np.size(B) else np.zeros((n, 0))
    if B.shape[0] != n:
        raise DimensionError(f"B has {B.shape[0]} rows, expected {n}")
    c = np.asarray(c, dtype=float).reshape(-1)
    if c.shape[0] != n:
        raise DimensionError(f"c has length {c.shape[0]}, expected {n}")
    if not delta > 0:
        raise ValueError("delta must be positive")
    aug = np.zeros((2 * n, 2 * n))
    aug[:n, :n] = A
    aug[:n, n:] = np.eye(n)
    E = expm(aug, delta)
    Ad = E[:n, :n]
    G = E[:n, n:]
    return Ad, G @ B, G @ c


# ---------------------------------------------------------------------------
# Riccati
# ---------------------------------------------------------------------------

def solve_lyapunov(A, C) -> np.ndarray:
    """Solve ``A^T X + X A + C = 0`` through its Kronecker form."""
    A = _square(A)
    n = A.shape[0]
    I = np.eye(n)
    K = np.kron(I, A.T) + np.kron(A.T, I)
    x = np.linalg.solve(K, -np.asarray(C, dtype=float).reshape(-1, order="F"))
    X = x.reshape(n, n, order="F")
    return 0.5 * (X + X.T)


def care_quadratic_term(B, convention: str = "printed") -> np.ndarray:
    """Matrix S in ``PA + A^T P - P S P + Q = 0``.

    ``"printed"`` gives ``S = B^T B`` (B must be square), ``"standard"`` the
    usual LQR choice ``S = B B^T`` with unit input weight.
    """
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if convention == "printed":
        if B.shape[0] != B.shape[1]:
            raise DimensionError("printed convention B^T B needs a square B")
        return B.T @ B
    if convention == "standard":
        return B @ B.T
    raise ValueError(f"unknown Riccati convention {convention!r}")


def care_residual(P, A, B, Q, convention: str = "printed") -> np.ndarray:
    S = care_quadratic_term(B, convention)
    return P @ A + A.T @ P - P @ S @ P + Q


def _is_hurwitz(M) -> bool:
    return bool(np.max(np.linalg.eigvals(M).real) < 0)


def _hamiltonian_seed(A, S, Q):
    n = A.shape[0]
    H = np.block([[A, -S], [-Q, -A.T]])
    w, V = np.linalg.eig(H)
    stable = np.argsort(w.real)[:n]
    if not np.all(w.real[stable] < 0):
        raise SolverFailure("Hamiltonian has eigenvalues on the imaginary axis")
    X1, X2 = V[:n, stable], V[n:, stable]
    P = np.real(np.linalg.solve(X1.T, X2.T).T)
    return 0.5 * (P + P.T)


def solve_care(A, B, Q, convention: str = "printed", tol: float = 1e-13, max_iter: int = 100) -> np.ndarray:
    """Stabilizing solution of ``PA + A^T P - P S P + Q = 0``.

    Newton-Kleinman iteration. The seed comes from the Bass pole-shift
    construction; if that fails (uncontrollable modes) the stable invariant
    subspace of the Hamiltonian is used instead.
    """
    A = _square(A)
    Q = _square(Q, "Q")
    n = A.shape[0]
    if Q.shape[0] != n:
        raise DimensionError("Q and A sizes differ")
    S = care_quadratic_term(B, convention)
    if S.shape != (n, n):
        raise DimensionError(f"B gives a {S.shape} quadratic term, expected {(n, n)}")
    # Bass: with beta above the spectral abscissa, Z from
    # (A + bI) Z + Z (A + bI)^T = 2 S makes A - S Z^{-1} Hurwitz.
    beta = np.linalg.norm(A, 2) + 1.0
    Ab = A + beta * np.eye(n)
    P = None
    try:
        Z = solve_lyapunov(Ab.T, -2.0 * S)
        if np.linalg.cond(Z) < 1e12:
            P0 = np.linalg.inv(Z)
            P0 = 0.5 * (P0 + P0.T)
            if _is_hurwitz(A - S @ P0):
                P = P0
    except np.linalg.LinAlgError:
        P = None
    scale = max(np.linalg.norm(Q), 1.0)
    try:
        if P is None:
            P = _hamiltonian_seed(A, S, Q)
        for _ in range(max_iter):
            Acl = A - S @ P
            P_new = solve_lyapunov(Acl, Q + P @ S @ P)
            step = np.linalg.norm(P_new - P)
            P = P_new
            if step <= tol * max(np.linalg.norm(P), 1.0):
                break
    except np.linalg.LinAlgError as exc:
        raise SolverFailure(f"no stabilizing Riccati solution ({exc})") from exc
    res = np.linalg.norm(care_residual(P, A, B, Q, convention))
    if not np.isfinite(res) or res > 1e-8 * scale or not _is_hurwitz(A - S @ P):
        raise SolverFailure(f"no stabilizing Riccati solution (residual {res:.3e})")
    try:
        np.linalg.cholesky(P)
    except np.linalg.LinAlgError as exc:
        raise SolverFailure("Riccati solution is not positive definite") from exc
    return P


# ---------------------------------------------------------------------------
# Quadratic programming
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QpResult:
    x: np.ndarray
    lam_lower: np.ndarray
    lam_upper: np.ndarray
    lam_ineq: np.ndarray
    iterations: int


def box_qp(H, g, lower=None, upper=None, G=None, h=None, tol: float = 1e-11, max_iter: int = 1000) -> QpResult:
    """Minimize ``0.5 x'Hx + g'x`` s.t. ``lower <= x <= upper`` and ``G x <= h``.

    Dual active-set method (Goldfarb-Idnani family): start from the
    unconstrained minimizer, repeatedly add the most violated constraint and
    drop active ones whose multipliers would turn negative. Each step solves
    the KKT system of the current working set directly, which is cheap at
    these sizes. Infeasibility shows up as a violated constraint that is
    linearly dependent on the working set with no multiplier left to drop.
    """
    H = _square(H, "H")
    n = H.shape[0]
    g = np.asarray(g, dtype=float).reshape(-1)
    if g.shape[0] != n:
        raise DimensionError("g has wrong length")
    lower = np.full(n, -np.inf) if lower is None else np.broadcast_to(np.asarray(lower, dtype=float), (n,))
    upper = np.full(n, np.inf) if upper is None else np.broadcast_to(np.asarray(upper, dtype=float), (n,))
    if np.any(lower > upper):
        raise InfeasibleError("lower bound exceeds upper bound", rows=np.flatnonzero(lower > upper))
    if G is None:
        G = np.zeros((0, n))
        h = np.zeros(0)
    G = np.atleast_2d(np.asarray(G, dtype=float)).reshape(-1, n)
    h = np.asarray(h, dtype=float).reshape(-1)
    m_ineq = G.shape[0]

    # Constraint rows N x <= b. Order: general inequalities, upper bounds, lower bounds.
    rows, rhs, kinds = [G], [h], [("ineq", i) for i in range(m_ineq)]
    up = np.flatnonzero(np.isfinite(upper))
    lo = np.flatnonzero(np.isfinite(lower))
    rows.append(np.eye(n)[up])
    rhs.append(upper[up])
    kinds += [("upper", i) for i in up]
    rows.append(-np.eye(n)[lo])
    rhs.append(-lower[lo])
    kinds += [("lower", i) for i in lo]
    N = np.vstack(rows)
    b = np.concatenate(rhs)
    scale = np.maximum(1.0, np.abs(b))

    try:
        L = np.linalg.cholesky(H)
    except np.linalg.LinAlgError as exc:
        raise SolverFailure("QP Hessian is not positive definite") from exc
    x = -np.linalg.solve(L.T, np.linalg.solve(L, g))
    active: list[int] = []
    u = np.zeros(0)
    it = 0
    for it in range(1, max_iter + 1):
        viol = (N @ x - b) / scale
        if active:
            viol[active] = -np.inf
        p = int(np.argmax(viol)) if viol.size else -1
        if p < 0 or viol[p] <= tol:
            break
        u_p = 0.0
        while True:
            k = len(active)
            NA = N[active].T
            K = np.zeros((n + k, n + k))
            K[:n, :n] = H
            K[:n, n:] = NA
            K[n:, :n] = NA.T
            rhs_vec = np.concatenate([-N[p], np.zeros(k)])
            sol = np.linalg.lstsq(K, rhs_vec, rcond=None)[0] if k else np.linalg.solve(H, -N[p])
            z = sol[:n]
            w = sol[n:]
            # partial step: an active multiplier reaching zero
            t1, drop = np.inf, -1
            for j in range(k):
                if w[j] < -1e-14:
                    tj = u[j] / -w[j]
                    if tj < t1:
                        t1, drop = tj, j
            slope = N[p] @ z
            s_p = N[p] @ x - b[p]
            if abs(slope) <= 1e-14 * max(1.0, np.linalg.norm(N[p])):
                if drop < 0:
                    bad = [kinds[a] for a in active] + [kinds[p]]
                    raise InfeasibleError("QP constraints are infeasible", rows=bad)
                u = u + t1 * w
                u_p += t1
                u = np.delete(u, drop)
                active.pop(drop)
                continue
            t2 = s_p / -slope
            if t2 <= t1:
                x = x + t2 * z
                u = np.append(u + t2 * w, u_p + t2)
                active.append(p)
                break
            x = x + t1 * z
            u = u + t1 * w
            u_p += t1
            u = np.delete(u, drop)
            active.pop(drop)
    else:
        raise SolverFailure("QP active-set iteration limit reached")

    u = np.maximum(u, 0.0)
    lam_ineq = np.zeros(m_ineq)
    lam_up = np.zeros(n)
    lam_lo = np.zeros(n)
    for a, val in zip(active, u):
        kind, idx = kinds[a]
        if kind == "ineq":
            lam_ineq[idx] = val
        elif kind == "upper":
            lam_up[idx] = val
            x[idx] = upper[idx]
        else:
            lam_lo[idx] = val
            x[idx] = lower[idx]
    x = np.clip(x, lower, upper)
    return QpResult(x=x, lam_lower=lam_lo, lam_upper=lam_up, lam_ineq=lam_ineq, iterations=it)


def solve_box_qp(H, g, lower, upper, G=None, h=None) -> np.ndarray:
    """Minimizer of ``0.5 v'Hv + g'v`` on a box, with optional ``G v <= h``."""
    return box_qp(H, g, lower, upper, G, h).x


def cholesky_pd(M) -> np.ndarray:
    """Cholesky factor; raises ``SolverFailure`` when M is not positive definite."""
    M = _square(M, "M")
    try:
        return np.linalg.cholesky(0.5 * (M + M.T))
    except np.linalg.LinAlgError as exc:
        raise SolverFailure("matrix is not positive definite") from exc
