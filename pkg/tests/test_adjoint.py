import numpy as np
import pytest

from trilevel.adjoint import (
    AdjointConfig,
    auto_scale_bilevel,
    auto_scales,
    bilevel_adjoint_gradient,
    grad_x_fbar,
    ml_adjoint_gradient,
    neumann_inverse_apply,
    ul_adjoint_gradient,
)
from trilevel.oracle import (
    DETERMINISTIC,
    Deterministic,
    OracleCapabilities,
    Point,
    ProblemOracle,
)
from trilevel.synthetic import (
    QuadraticSpec,
    closed_form_point,
    closed_form_z,
    default_quadratic,
    default_quartic,
    make_oracle,
    reduced_gradient,
)


def decoupled_spec(n=4, m=4, t=4):
    """All cross-couplings zero: the levels separate completely."""
    return QuadraticSpec(
        n=n, m=m, t=t,
        h_x=np.arange(1.0, n + 1), h_y=np.ones(m), h_z=np.ones(t),
        Hxx=np.eye(n), Hyy=2 * np.eye(m), Hzz=np.eye(t),
        Hxy=np.zeros((n, m)), Hxz=np.zeros((n, t)), Hyz=np.zeros((m, t)),
    )


def engines_for(oracle, point, q=40):
    c0, c1 = auto_scales(oracle, point, neumann_q=q)
    return [
        AdjointConfig(engine="H"),
        AdjointConfig(engine="NFD", fd_eps=0.1),
        AdjointConfig(engine="AD", fd_eps=0.1, neumann_q=q, c0=c0, c1=c1),
    ]


class TestNeumannInverse:
    def test_scalar_truncation(self):
        # A = 1, scale = 0.5: result = 0.5 * sum 0.5^h = 1 - 0.5^{Q+1}
        out = neumann_inverse_apply(lambda v: v, np.array([1.0]), Q=3, scale=0.5)
        np.testing.assert_allclose(out, [0.9375])

    def test_q_zero(self):
        b = np.array([2.0, -1.0])
        np.testing.assert_allclose(neumann_inverse_apply(lambda v: v, b, 0, 0.25), 0.25 * b)

    def test_exact_when_scaled_to_identity(self):
        A = 4.0
        b = np.array([8.0])
        for q in (0, 1, 5):
            out = neumann_inverse_apply(lambda v: A * v, b, q, scale=1.0 / A)
            np.testing.assert_allclose(out, [2.0])

    def test_geometric_decay_on_diagonal(self):
        diag = np.array([1.0, 2.0, 4.0])
        scale = 1.0 / 8.0
        b = np.ones(3)
        exact = b / diag
        errors = []
        for q in range(1, 21):
            approx = neumann_inverse_apply(lambda v: diag * v, b, q, scale)
            errors.append(np.linalg.norm(approx - exact))
        rho = 1.0 - scale * diag.min()
        ratios = [errors[i + 1] / errors[i] for i in range(len(errors) - 1)]
        # asymptotically the error contracts by the slowest-mode factor
        assert abs(ratios[-1] - rho) < 0.01

    def test_error_bound_on_slow_mode(self):
        # with b on the slowest eigenvector, the bound scale*rho^{Q+1}/(1-rho)|b|
        # is tight within a factor 2
        diag = np.array([0.5, 1.5, 3.0])
        scale = 0.25
        rho = 1.0 - scale * diag.min()
        b = np.eye(3)[0]
        for q in range(1, 21):
            approx = neumann_inverse_apply(lambda v: diag * v, b, q, scale)
            err = np.linalg.norm(approx - b / diag)
            bound = scale * rho ** (q + 1) / (1 - rho) * np.linalg.norm(b)
            assert err <= bound * 1.0000001
            assert err >= bound / 2.0

    def test_validation(self):
        with pytest.raises(ValueError):
            neumann_inverse_apply(lambda v: v, np.ones(2), -1, 0.5)
        with pytest.raises(ValueError):
            neumann_inverse_apply(lambda v: v, np.ones(2), 2, 0.0)


class TestMlAdjoint:
    def test_identity_example(self):
        spec = default_quadratic(6, 6, 6, rng=0)
        oracle = make_oracle(spec)
        e1 = np.eye(6)[0]
        point = Point(e1, np.zeros(6), closed_form_z(spec, e1, np.zeros(6)))
        for cfg in engines_for(oracle, point):
            g = ml_adjoint_gradient(oracle, point, DETERMINISTIC, cfg)
            np.testing.assert_allclose(g, -2.0 * e1, atol=1e-8)

    def test_vanishes_on_ml_solution(self):
        spec = default_quadratic(6, 6, 6, rng=0)
        oracle = make_oracle(spec)
        rng = np.random.default_rng(1)
        x = rng.uniform(0, 20, 6)
        point = Point(x, x, closed_form_z(spec, x, x))
        g = ml_adjoint_gradient(oracle, point, DETERMINISTIC, AdjointConfig(engine="H"))
        assert np.linalg.norm(g) <= 1e-10

    def test_decoupled_reduces_to_grad_y_f2(self):
        oracle = make_oracle(decoupled_spec())
        rng = np.random.default_rng(2)
        point = Point(rng.standard_normal(4), rng.standard_normal(4), rng.standard_normal(4))
        expected = oracle.grad_y_f2(point, DETERMINISTIC)
        for cfg in engines_for(oracle, point):
            g = ml_adjoint_gradient(oracle, point, DETERMINISTIC, cfg)
            np.testing.assert_allclose(g, expected, atol=1e-9)


class TestGradXFbar:
    def test_matches_fd_of_fbar(self):
        spec = default_quadratic(5, 5, 5, rng=3)
        oracle = make_oracle(spec)
        rng = np.random.default_rng(3)
        x = rng.uniform(0, 5, 5)
        y = rng.uniform(0, 5, 5)
        point = Point(x, y, closed_form_z(spec, x, y))

        def fbar(xv):
            z = closed_form_z(spec, xv, y)
            return oracle.f2(Point(xv, y, z), DETERMINISTIC)

        h = 1e-6
        fd = np.array([(fbar(x + h * e) - fbar(x - h * e)) / (2 * h) for e in np.eye(5)])
        for cfg in engines_for(oracle, point):
            g = grad_x_fbar(oracle, point, DETERMINISTIC, cfg)
            np.testing.assert_allclose(g, fd, atol=1e-5)

    def test_decoupled_reduces_to_grad_x_f2(self):
        oracle = make_oracle(decoupled_spec())
        point = Point(np.ones(4), np.ones(4), np.ones(4))
        expected = oracle.grad_x_f2(point, DETERMINISTIC)
        for cfg in engines_for(oracle, point):
            np.testing.assert_allclose(
                grad_x_fbar(oracle, point, DETERMINISTIC, cfg), expected, atol=1e-10
            )


class TestUlAdjoint:
    def test_identity_formula_on_solution_path(self):
        spec = default_quadratic(10, 10, 10, rng=4)
        oracle = make_oracle(spec)
        rng = np.random.default_rng(4)
        x = rng.uniform(0, 20, 10)
        point = Point(x, x, 2 * x)
        expected = spec.h_x + spec.h_y + 2 * spec.h_z + 7 * x
        g = ul_adjoint_gradient(oracle, point, DETERMINISTIC, AdjointConfig(engine="H"))
        np.testing.assert_allclose(g, expected, rtol=1e-12)

    def test_decoupled_reduces_to_grad_x_f1(self):
        oracle = make_oracle(decoupled_spec())
        rng = np.random.default_rng(5)
        point = Point(rng.standard_normal(4), rng.standard_normal(4), rng.standard_normal(4))
        expected = oracle.grad_x_f1(point, DETERMINISTIC)
        for cfg in engines_for(oracle, point):
            g = ul_adjoint_gradient(oracle, point, DETERMINISTIC, cfg)
            np.testing.assert_allclose(g, expected, atol=1e-8)

    def test_engines_agree_at_generic_point(self):
        spec = default_quadratic(10, 10, 10, rng=6)
        oracle = make_oracle(spec)
        rng = np.random.default_rng(6)
        point = Point(rng.uniform(0, 20, 10), rng.uniform(0, 20, 10), rng.uniform(0, 20, 10))
        cfgs = engines_for(oracle, point)
        grads = [ul_adjoint_gradient(oracle, point, DETERMINISTIC, c) for c in cfgs]
        for i in range(len(grads)):
            for j in range(i + 1, len(grads)):
                rel = np.linalg.norm(grads[i] - grads[j]) / np.linalg.norm(grads[i])
                assert rel <= 1e-5

    def test_engines_match_analytic_reduced_gradient(self):
        spec = default_quadratic(10, 10, 10, rng=7)
        oracle = make_oracle(spec)
        rng = np.random.default_rng(7)
        x = rng.uniform(0, 20, 10)
        point = closed_form_point(spec, x)
        expected = reduced_gradient(spec, x)
        for cfg in engines_for(oracle, point):
            g = ul_adjoint_gradient(oracle, point, DETERMINISTIC, cfg)
            assert np.linalg.norm(g - expected) / np.linalg.norm(expected) <= 1e-6

    def test_nfd_equals_h_for_any_eps_on_quadratic(self):
        # central differences are exact on affine maps, so the only gap is
        # the CG tolerance
        spec = default_quadratic(8, 8, 8, rng=8)
        oracle = make_oracle(spec)
        rng = np.random.default_rng(8)
        point = Point(rng.uniform(0, 9, 8), rng.uniform(0, 9, 8), rng.uniform(0, 9, 8))
        gH = ul_adjoint_gradient(oracle, point, DETERMINISTIC, AdjointConfig(engine="H"))
        for eps in (1.0, 0.1, 1e-3):
            gN = ul_adjoint_gradient(
                oracle, point, DETERMINISTIC, AdjointConfig(engine="NFD", fd_eps=eps, cg_tol=1e-12)
            )
            np.testing.assert_allclose(gN, gH, rtol=1e-7)

    def test_quartic_h_matches_reduced_gradient(self):
        spec = default_quartic(rng=9)
        oracle = make_oracle(spec)
        rng = np.random.default_rng(9)
        x = rng.uniform(-0.4, 0, 5)
        point = closed_form_point(spec, x)
        g = ul_adjoint_gradient(oracle, point, DETERMINISTIC, AdjointConfig(engine="H"))
        expected = reduced_gradient(spec, x)
        assert np.linalg.norm(g - expected) / np.linalg.norm(expected) <= 1e-10

    def test_quartic_nfd_second_order_in_eps(self):
        spec = default_quartic(rng=10)
        oracle = make_oracle(spec)
        rng = np.random.default_rng(10)
        # keep the first coordinate away from 0: the solution-path Hessian
        # scales with w^2 = (2 x_0)^2 and degenerates as x_0 -> 0
        point = closed_form_point(spec, rng.uniform(-0.4, -0.1, 5))
        gH = ul_adjoint_gradient(oracle, point, DETERMINISTIC, AdjointConfig(engine="H"))
        errs = []
        for eps in (0.1, 0.01):
            gN = ul_adjoint_gradient(
                oracle, point, DETERMINISTIC, AdjointConfig(engine="NFD", fd_eps=eps)
            )
            errs.append(np.linalg.norm(gN - gH) / np.linalg.norm(gH))
        assert errs[0] / errs[1] >= 50.0


class CountingOracle:
    """Delegates to an inner oracle, recording every sample it sees.

    Deliberately not a ProblemOracle subclass: the base class defines all
    evaluation methods, which would shadow the delegating __getattr__.
    """

    def __init__(self, inner):
        self.inner = inner
        self.samples = []
        self.capabilities = inner.capabilities
        self.dims = inner.dims

    def __getattr__(self, name):
        target = getattr(self.inner, name)
        if not callable(target):
            return target

        def wrapper(point, sample, *rest):
            self.samples.append(sample)
            return target(point, sample, *rest)

        return wrapper


class TestContracts:
    def test_fixed_sample_within_one_call(self):
        spec = default_quadratic(5, 5, 5, rng=11)
        counting = CountingOracle(make_oracle(spec))
        rng = np.random.default_rng(11)
        point = Point(rng.uniform(0, 9, 5), rng.uniform(0, 9, 5), rng.uniform(0, 9, 5))
        marker = Deterministic()
        for cfg in engines_for(make_oracle(spec), point):
            counting.samples.clear()
            ul_adjoint_gradient(counting, point, marker, cfg)
            assert len(counting.samples) > 0
            assert all(s is marker for s in counting.samples)

    def test_curvature_event_flagged(self):
        class IndefiniteOracle(ProblemOracle):
            capabilities = OracleCapabilities(has_hessians=True, has_hvp=True)

            @property
            def dims(self):
                return 2, 2, 2

            def grad_z_f2(self, p, s):
                return np.ones(2)

            def grad_y_f2(self, p, s):
                return np.ones(2)

            def grad_y_f3(self, p, s):
                return np.zeros(2)

            def grad_z_f3(self, p, s):
                return -p.z  # concave lower level: FD HVP gives -I

        events = []
        g = ml_adjoint_gradient(
            IndefiniteOracle(),
            Point(np.zeros(2), np.zeros(2), np.zeros(2)),
            DETERMINISTIC,
            AdjointConfig(engine="NFD"),
            events=events,
        )
        assert any("cg_curvature" in e for e in events)
        assert np.all(np.isfinite(g))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            AdjointConfig(engine="XX")
        with pytest.raises(ValueError):
            AdjointConfig(engine="AD", fd_eps=-1)
        cfg = AdjointConfig(engine="AD")  # q/c0/c1 checked at use
        oracle = make_oracle(default_quadratic(3, 3, 3, rng=0))
        p = Point(np.ones(3), np.ones(3), np.ones(3))
        with pytest.raises(ValueError):
            ml_adjoint_gradient(oracle, p, DETERMINISTIC, cfg)
        with pytest.raises(ValueError):
            ul_adjoint_gradient(
                oracle, p, DETERMINISTIC, AdjointConfig(engine="AD", neumann_q=5, c0=1.0)
            )

    def test_h_requires_capabilities(self):
        class GradOnly(ProblemOracle):
            capabilities = OracleCapabilities()

            @property
            def dims(self):
                return 2, 2, 2

        p = Point(np.zeros(2), np.zeros(2), np.zeros(2))
        with pytest.raises(ValueError):
            ml_adjoint_gradient(GradOnly(), p, DETERMINISTIC, AdjointConfig(engine="H"))
        with pytest.raises(ValueError):
            ul_adjoint_gradient(GradOnly(), p, DETERMINISTIC, AdjointConfig(engine="H"))


class TestNeumannGuard:
    def test_ad_engine_survives_stale_scale(self):
        # scale constant far below the Hessian norm: the raw series would
        # overflow; the engine truncates, flags the event, stays finite
        spec = default_quadratic(4, 4, 4, rng=30)
        oracle = make_oracle(spec)
        rng = np.random.default_rng(30)
        point = Point(rng.uniform(0, 9, 4), rng.uniform(0, 9, 4), rng.uniform(0, 9, 4))
        events = []
        cfg = AdjointConfig(engine="AD", neumann_q=400, c0=1e-6, c1=1e-6)
        g = ul_adjoint_gradient(oracle, point, DETERMINISTIC, cfg, events=events)
        assert np.all(np.isfinite(g))
        assert any(e.startswith("neumann_truncated") for e in events)

    def test_guard_inactive_on_contractive_series(self):
        spec = default_quadratic(4, 4, 4, rng=31)
        oracle = make_oracle(spec)
        point = closed_form_point(spec, np.ones(4))
        c0, c1 = auto_scales(oracle, point)
        events = []
        gA = ul_adjoint_gradient(
            oracle, point, DETERMINISTIC,
            AdjointConfig(engine="AD", neumann_q=60, c0=c0, c1=c1), events=events,
        )
        gH = ul_adjoint_gradient(oracle, point, DETERMINISTIC, AdjointConfig(engine="H"))
        assert not events
        np.testing.assert_allclose(gA, gH, rtol=1e-8)


class TestAutoScales:
    def test_identity_instance_values(self):
        spec = default_quadratic(6, 6, 6, rng=12)
        oracle = make_oracle(spec)
        point = closed_form_point(spec, np.ones(6))
        c0, c1 = auto_scales(oracle, point)
        assert c0 == pytest.approx(2.0)
        # reduced middle-level Hessian is 2I on this instance
        assert c1 == pytest.approx(4.0, rel=1e-3)

    def test_pinned_c0(self):
        spec = default_quadratic(4, 4, 4, rng=13)
        oracle = make_oracle(spec)
        point = closed_form_point(spec, np.ones(4))
        c0, _ = auto_scales(oracle, point, c0=3.5)
        assert c0 == 3.5


class TestBilevelGradient:
    def test_matches_fd_of_frozen_z_reduction(self):
        spec = default_quadratic(5, 5, 5, rng=14)
        oracle = make_oracle(spec)
        rng = np.random.default_rng(14)
        x = rng.uniform(0, 5, 5)
        z_bar = rng.uniform(0, 5, 5)

        def y_of(xv):
            return np.linalg.solve(spec.Hyy, spec.Hyx @ xv + spec.Hyz @ z_bar)

        def f_red(xv):
            return oracle.f1(Point(xv, y_of(xv), z_bar), DETERMINISTIC)

        h = 1e-6
        fd = np.array([(f_red(x + h * e) - f_red(x - h * e)) / (2 * h) for e in np.eye(5)])
        point = Point(x, y_of(x), z_bar)
        c1 = auto_scale_bilevel(oracle, point)
        for cfg in [
            AdjointConfig(engine="H"),
            AdjointConfig(engine="NFD"),
            AdjointConfig(engine="AD", neumann_q=60, c0=1.0, c1=c1),
        ]:
            g = bilevel_adjoint_gradient(oracle, point, DETERMINISTIC, cfg)
            np.testing.assert_allclose(g, fd, atol=2e-5)
