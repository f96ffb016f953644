import numpy as np
import pytest

from trilevel.linalg import (
    SingularMatrixError,
    cg_solve,
    is_symmetric,
    lu_factor_cached,
    solve_dense,
    tensor_contract_mat,
    tensor_contract_vec,
)


def random_spd(rng, d):
    A = rng.standard_normal((d, d))
    return A @ A.T + d * np.eye(d)


class TestCgSolve:
    def test_scaled_identity(self):
        report = cg_solve(lambda v: 2.0 * v, np.array([2.0, 4.0]))
        np.testing.assert_allclose(report.solution, [1.0, 2.0], atol=1e-12)
        assert not report.terminated_on_curvature

    def test_two_by_two_against_cramer(self):
        A = np.array([[4.0, 1.0], [1.0, 3.0]])
        b = np.array([1.0, 2.0])
        # Cramer: det = 11, x = (3*1 - 1*2)/11, y = (4*2 - 1*1)/11
        expected = np.array([1.0 / 11.0, 7.0 / 11.0])
        report = cg_solve(lambda v: A @ v, b, tol=1e-12)
        np.testing.assert_allclose(report.solution, expected, rtol=1e-10)

    def test_negative_definite_curvature(self):
        report = cg_solve(lambda v: -v, np.array([1.0, 0.0]))
        assert report.terminated_on_curvature
        assert report.iterations == 0
        np.testing.assert_allclose(report.solution, [0.0, 0.0])

    def test_spd_converges_within_dim_plus_two(self):
        rng = np.random.default_rng(1)
        for d in (2, 5, 11, 20):
            A = random_spd(rng, d)
            b = rng.standard_normal(d)
            report = cg_solve(lambda v: A @ v, b, tol=1e-8)
            assert report.iterations <= d + 2
            assert report.residual_norm <= 1e-8 * max(1.0, np.linalg.norm(b))

    def test_agrees_with_direct_solve(self):
        rng = np.random.default_rng(2)
        for d in (3, 8, 20):
            A = random_spd(rng, d)
            b = rng.standard_normal(d)
            x_cg = cg_solve(lambda v: A @ v, b, tol=1e-12).solution
            x_lu = solve_dense(A, b)
            np.testing.assert_allclose(x_cg, x_lu, rtol=1e-6)

    def test_long_solve_residual_refresh(self):
        # ill-conditioned diagonal forces many iterations through the
        # 50-step residual recomputation
        d = 60
        diag = np.geomspace(1.0, 1e4, d)
        b = np.ones(d)
        report = cg_solve(lambda v: diag * v, b, tol=1e-10, max_iters=10 * d)
        np.testing.assert_allclose(diag * report.solution, b, atol=1e-8)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            cg_solve(lambda v: v[:1], np.array([1.0, 2.0]))

    def test_bad_tol(self):
        with pytest.raises(ValueError):
            cg_solve(lambda v: v, np.array([1.0]), tol=0.0)

    def test_zero_rhs(self):
        report = cg_solve(lambda v: v, np.zeros(3))
        assert report.iterations == 0
        np.testing.assert_allclose(report.solution, 0.0)


class TestTensorContractions:
    def test_vec_zero_tensor(self):
        out = tensor_contract_vec(np.zeros((2, 2, 2)), np.array([1.0, 1.0]))
        np.testing.assert_array_equal(out, np.zeros((2, 2)))

    def test_vec_single_entry(self):
        T = np.zeros((2, 2, 2))
        T[0, 0, 0] = 1.0
        out = tensor_contract_vec(T, np.array([3.0, 0.0]))
        expected = np.zeros((2, 2))
        expected[0, 0] = 3.0
        np.testing.assert_array_equal(out, expected)

    def test_vec_basis_vector_selects_slice(self):
        rng = np.random.default_rng(3)
        T = rng.standard_normal((2, 3, 2))
        e2 = np.array([0.0, 1.0, 0.0])
        np.testing.assert_allclose(tensor_contract_vec(T, e2), T[:, 1, :])

    def test_vec_brute_force(self):
        rng = np.random.default_rng(4)
        T = rng.standard_normal((3, 4, 2))
        v = rng.standard_normal(4)
        expected = np.zeros((3, 2))
        for a in range(3):
            for b in range(4):
                for c in range(2):
                    expected[a, c] += T[a, b, c] * v[b]
        np.testing.assert_allclose(tensor_contract_vec(T, v), expected, atol=1e-14)

    def test_mat_identity(self):
        rng = np.random.default_rng(5)
        T = rng.standard_normal((2, 3, 4))
        np.testing.assert_allclose(tensor_contract_mat(T, np.eye(3)), T)

    def test_mat_hand_sum(self):
        T = np.ones((1, 2, 1))
        M = np.array([[2.0], [3.0]])
        out = tensor_contract_mat(T, M)
        assert out.shape == (1, 1, 1)
        assert out[0, 0, 0] == 5.0

    def test_mat_brute_force(self):
        rng = np.random.default_rng(6)
        T = rng.standard_normal((2, 2, 2))
        M = rng.standard_normal((2, 2))
        expected = np.zeros((2, 2, 2))
        for a in range(2):
            for b in range(2):
                for j in range(2):
                    for c in range(2):
                        expected[a, j, c] += T[a, b, c] * M[b, j]
        np.testing.assert_allclose(tensor_contract_mat(T, M), expected, atol=1e-14)

    def test_vec_equals_mat_with_column(self):
        rng = np.random.default_rng(7)
        for dims in [(2, 3, 4), (4, 2, 3), (3, 3, 3)]:
            T = rng.standard_normal(dims)
            v = rng.standard_normal(dims[1])
            via_mat = tensor_contract_mat(T, v[:, None])[:, 0, :]
            np.testing.assert_allclose(tensor_contract_vec(T, v), via_mat, atol=1e-14)

    def test_linearity(self):
        rng = np.random.default_rng(8)
        T = rng.standard_normal((4, 4, 4))
        u, v = rng.standard_normal(4), rng.standard_normal(4)
        a, b = 0.7, -1.3
        lhs = tensor_contract_vec(T, a * u + b * v)
        rhs = a * tensor_contract_vec(T, u) + b * tensor_contract_vec(T, v)
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            tensor_contract_vec(np.zeros((2, 3, 2)), np.zeros(2))
        with pytest.raises(ValueError):
            tensor_contract_mat(np.zeros((2, 3, 2)), np.zeros((2, 2)))


class TestSolveDense:
    def test_identity(self):
        rng = np.random.default_rng(9)
        B = rng.standard_normal((4, 3))
        np.testing.assert_allclose(solve_dense(np.eye(4), B), B)

    def test_diagonal(self):
        A = np.array([[2.0, 0.0], [0.0, 4.0]])
        np.testing.assert_allclose(solve_dense(A, np.array([2.0, 4.0])), [1.0, 1.0])

    def test_cramer(self):
        A = np.array([[4.0, 1.0], [1.0, 3.0]])
        x = solve_dense(A, np.array([1.0, 2.0]))
        np.testing.assert_allclose(x, [0.090909, 0.636364], atol=1e-6)

    def test_residual_bound(self):
        rng = np.random.default_rng(10)
        for d in (5, 50, 120):
            A = random_spd(rng, d)
            B = rng.standard_normal((d, 2))
            X = solve_dense(A, B)
            assert np.linalg.norm(A @ X - B) <= 1e-8 * np.linalg.norm(B)

    def test_singular(self):
        with pytest.raises(SingularMatrixError):
            solve_dense(np.array([[1.0, 1.0], [1.0, 1.0]]), np.array([1.0, 2.0]))

    def test_non_square(self):
        with pytest.raises(ValueError):
            solve_dense(np.zeros((2, 3)), np.zeros(2))

    def test_pivoting_handles_zero_leading_entry(self):
        A = np.array([[0.0, 1.0], [1.0, 0.0]])
        np.testing.assert_allclose(solve_dense(A, np.array([2.0, 3.0])), [3.0, 2.0])

    def test_cached_factorization_reused(self):
        A = random_spd(np.random.default_rng(11), 6)
        f1 = lu_factor_cached(A)
        f2 = lu_factor_cached(A)
        assert f1[0] is f2[0]
        # a distinct object with equal values is factored separately
        f3 = lu_factor_cached(A.copy())
        assert f3[0] is not f1[0]


def test_is_symmetric():
    assert is_symmetric(np.array([[1.0, 2.0], [2.0, 3.0]]))
    assert not is_symmetric(np.array([[1.0, 2.0], [2.1, 3.0]]))
