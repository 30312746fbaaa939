import itertools

import numpy as np
import pytest
import scipy.integrate
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st

from shwmpc.errors import DimensionError, InfeasibleError, SolverFailure
from shwmpc.linalg import (box_qp, care_residual, cholesky_pd, discretize_pair, expm, solve_box_qp,
                           solve_care, solve_lyapunov)


def random_stable(rng, n, margin=0.5):
    A = rng.normal(size=(n, n))
    shift = np.max(np.linalg.eigvals(A).real) + margin
    return A - shift * np.eye(n)


class TestExpm:
    def test_zero(self):
        assert np.array_equal(expm(np.zeros((2, 2))), np.eye(2))

    def test_diagonal_closed_form(self):
        E = expm(np.diag([-1.0, -2.0]), 0.5)
        assert np.allclose(E, np.diag([np.exp(-0.5), np.exp(-1.0)]), rtol=1e-13, atol=0)

    def test_nilpotent(self):
        E = expm(np.array([[0.0, 1.0], [0.0, 0.0]]), 0.1)
        assert np.allclose(E, [[1.0, 0.1], [0.0, 1.0]], atol=1e-15)

    def test_against_scipy(self, rng):
        for n in (1, 3, 6):
            for scale in (0.1, 1.0, 10.0):
                A = scale * rng.normal(size=(n, n))
                ref = scipy.linalg.expm(A)
                assert np.linalg.norm(expm(A) - ref) <= 1e-11 * np.linalg.norm(ref)

    def test_semigroup(self, rng):
        for _ in range(20):
            A = rng.normal(size=(4, 4))
            A *= 2.0 / np.linalg.norm(A, 2)
            s, t = rng.uniform(0, 1, 2)
            lhs = expm(A, s + t)
            assert np.linalg.norm(lhs - expm(A, s) @ expm(A, t)) <= 1e-9 * np.linalg.norm(lhs)

    def test_non_square(self):
        with pytest.raises(DimensionError):
            expm(np.zeros((2, 3)))


class TestDiscretize:
    def test_integrator(self):
        Ad, Bd, cd = discretize_pair(np.zeros((2, 2)), np.eye(2), np.zeros(2), 0.1)
        assert np.allclose(Ad, np.eye(2), atol=1e-15)
        assert np.allclose(Bd, 0.1 * np.eye(2), atol=1e-15)
        assert np.array_equal(cd, np.zeros(2))

    def test_scalar_closed_form(self):
        delta = 0.3
        Ad, Bd, cd = discretize_pair([[-1.0]], [[1.0]], [1.0], delta)
        e = np.exp(-delta)
        assert abs(Ad[0, 0] - e) < 1e-14
        assert abs(Bd[0, 0] - (1 - e)) < 1e-14
        assert abs(cd[0] - (1 - e)) < 1e-14

    def test_diagonal_closed_form(self, rng):
        a = -rng.uniform(0.2, 3.0, 4)
        B = rng.normal(size=(4, 4))
        c = rng.normal(size=4)
        delta = 0.1
        Ad, Bd, cd = discretize_pair(np.diag(a), B, c, delta)
        g = (np.exp(a * delta) - 1.0) / a
        assert np.max(np.abs(Ad - np.diag(np.exp(a * delta)))) < 1e-10
        assert np.max(np.abs(Bd - g[:, None] * B)) < 1e-10
        assert np.max(np.abs(cd - g * c)) < 1e-10

    def test_quadrature_oracle(self, rng):
        A = random_stable(rng, 3)
        B = rng.normal(size=(3, 3))
        c = rng.normal(size=3)
        delta = 0.2
        G, _ = scipy.integrate.quad_vec(lambda tau: scipy.linalg.expm(A * (delta - tau)), 0.0, delta,
                                        epsabs=1e-14, epsrel=1e-13)
        _, Bd, cd = discretize_pair(A, B, c, delta)
        assert np.linalg.norm(Bd - G @ B) <= 1e-8 * np.linalg.norm(G @ B)
        assert np.linalg.norm(cd - G @ c) <= 1e-8 * np.linalg.norm(G @ c)

    def test_zero_affine_term_exact(self, rng):
        _, _, cd = discretize_pair(random_stable(rng, 3), np.eye(3), np.zeros(3), 0.1)
        assert np.array_equal(cd, np.zeros(3))

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            discretize_pair(np.eye(2), np.eye(3), np.zeros(2), 0.1)


class TestLyapunov:
    def test_against_scipy(self, rng):
        A = random_stable(rng, 4)
        C = rng.normal(size=(4, 4))
        C = C @ C.T
        X = solve_lyapunov(A, C)
        assert np.allclose(A.T @ X + X @ A + C, 0, atol=1e-10)
        assert np.allclose(X, scipy.linalg.solve_continuous_lyapunov(A.T, -C), atol=1e-10)


class TestCare:
    def test_scalar_unit(self):
        assert abs(solve_care([[0.0]], [[1.0]], [[1.0]])[0, 0] - 1.0) < 1e-12

    @pytest.mark.parametrize("a,b,q", [(0.5, 2.0, 3.0), (-1.0, 0.3, 1.0), (2.0, 1.0, 0.1)])
    def test_scalar_formula(self, a, b, q):
        P = solve_care([[a]], [[b]], [[q]])[0, 0]
        assert abs(P - (a + np.sqrt(a * a + b * b * q)) / b**2) < 1e-10

    @pytest.mark.parametrize("convention", ["printed", "standard"])
    def test_random_residual(self, rng, convention):
        for _ in range(5):
            A = rng.normal(size=(4, 4))
            B = rng.normal(size=(4, 4))
            Q = rng.normal(size=(4, 4))
            Q = Q @ Q.T + 0.1 * np.eye(4)
            P = solve_care(A, B, Q, convention)
            assert np.linalg.norm(care_residual(P, A, B, Q, convention)) <= 1e-8 * np.linalg.norm(Q)
            assert np.max(np.abs(P - P.T)) <= 1e-10
            cholesky_pd(P)

    def test_standard_matches_scipy(self, rng):
        A = rng.normal(size=(3, 3))
        B = rng.normal(size=(3, 3))
        Q = np.eye(3)
        ref = scipy.linalg.solve_continuous_are(A, B, Q, np.eye(3))
        assert np.allclose(solve_care(A, B, Q, "standard"), ref, atol=1e-9)

    def test_printed_matches_scipy_with_transposed_input(self, rng):
        A = rng.normal(size=(3, 3))
        B = rng.normal(size=(3, 3))
        ref = scipy.linalg.solve_continuous_are(A, B.T, np.eye(3), np.eye(3))
        assert np.allclose(solve_care(A, B, np.eye(3), "printed"), ref, atol=1e-9)

    def test_unstabilizable(self):
        # unstable mode not reached by the input
        with pytest.raises(SolverFailure):
            solve_care(np.diag([1.0, -1.0]), np.array([[0.0, 0.0], [0.0, 1.0]]), np.eye(2), "standard")


def brute_force_box_qp(H, g, lo, hi):
    """Enumerate every (free / at-lower / at-upper) pattern; keep the feasible KKT point."""
    n = len(g)
    best, best_f = None, np.inf
    for pattern in itertools.product((0, 1, 2), repeat=n):
        x = np.zeros(n)
        fixed = np.array([p != 0 for p in pattern])
        x[fixed] = [lo[i] if pattern[i] == 1 else hi[i] for i in np.nonzero(fixed)[0]]
        free = ~fixed
        if free.any():
            rhs = -(g[free] + H[np.ix_(free, fixed)] @ x[fixed])
            x[free] = np.linalg.solve(H[np.ix_(free, free)], rhs)
        if np.any(x < lo - 1e-12) or np.any(x > hi + 1e-12):
            continue
        f = 0.5 * x @ H @ x + g @ x
        if f < best_f:
            best, best_f = x, f
    return best


class TestBoxQp:
    def test_interior(self):
        x = solve_box_qp(np.eye(3), np.zeros(3), -np.ones(3), np.ones(3))
        assert np.allclose(x, 0)

    def test_clipped(self):
        x = solve_box_qp(np.eye(3), -4 * np.ones(3), -np.ones(3), np.ones(3))
        assert np.allclose(x, 1)

    def test_brute_force_oracle(self, rng):
        for _ in range(10):
            M = rng.normal(size=(6, 6))
            H = M @ M.T + 0.5 * np.eye(6)
            g = 3 * rng.normal(size=6)
            lo, hi = -rng.uniform(0.1, 1, 6), rng.uniform(0.1, 1, 6)
            ref = brute_force_box_qp(H, g, lo, hi)
            assert np.max(np.abs(solve_box_qp(H, g, lo, hi) - ref)) < 1e-7

    def test_inequalities_against_enumeration(self):
        # min 0.5|x|^2 + g.x  s.t. x1 + x2 <= -1.5, box [-1, 1]^2
        H = np.eye(2)
        g = np.array([0.0, 0.5])
        res = box_qp(H, g, -np.ones(2), np.ones(2), np.array([[1.0, 1.0]]), np.array([-1.5]))
        assert np.allclose(res.x, [-0.5, -1.0], atol=1e-10)
        # multipliers: stationarity H x + g + G^T mu - lam_lo + lam_up = 0
        r = H @ res.x + g + res.lam_ineq[0] * np.ones(2) - res.lam_lower + res.lam_upper
        assert np.max(np.abs(r)) < 1e-10
        assert np.all(res.lam_ineq >= 0) and np.all(res.lam_lower >= 0) and np.all(res.lam_upper >= 0)

    def test_infeasible(self):
        with pytest.raises(InfeasibleError) as info:
            box_qp(np.eye(2), np.zeros(2), -np.ones(2), np.ones(2), np.array([[1.0, 1.0]]), np.array([-3.0]))
        assert info.value.rows

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 8), st.integers(0, 2**31 - 1))
    def test_projected_gradient_kkt(self, n, seed):
        r = np.random.default_rng(seed)
        M = r.normal(size=(n, n))
        H = M @ M.T + 0.1 * np.eye(n)
        g = 5 * r.normal(size=n)
        lo = -r.uniform(0, 2, n)
        hi = lo + r.uniform(0.01, 3, n)
        x = solve_box_qp(H, g, lo, hi)
        assert np.max(np.abs(x - np.clip(x - (H @ x + g), lo, hi))) <= 1e-7
        assert np.all(x >= lo) and np.all(x <= hi)


def test_cholesky_rejects_indefinite():
    with pytest.raises(Exception):
        cholesky_pd(np.diag([1.0, -1.0]))
