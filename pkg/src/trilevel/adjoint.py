"""Adjoint gradients of the reduced middle- and upper-level objectives.

Three interchangeable backends compute the same two quantities:

* the middle-level adjoint gradient
      grad_y fbar = grad_y f2 - H_yz(f3) Hzz(f3)^{-1} grad_z f2,
* the upper-level adjoint gradient
      grad f = (grad_x f1 - H_xz(f3) lam_z) - Hbar_xy lam_y,
  with lam_z = Hzz(f3)^{-1} grad_z f1 and
  lam_y = Hbar_yy^{-1} (grad_y f1 - H_yz(f3) lam_z),

where Hbar_xy / Hbar_yy are the cross and curvature Hessians of the
reduced middle-level objective fbar(x, y) = f2(x, y, z(x, y)).

Backends:

* ``H``   assembles Hbar_yx / Hbar_yy densely from analytic Hessians and
  third-order contractions and uses LU solves. Reference quality; only
  meant for desk-scale problems.
* ``NFD`` solves every inverse-Hessian system with linear CG, realizing
  each Hessian-vector product as a central finite difference of the
  corresponding gradient.
* ``AD``  replaces the solves with truncated Neumann series at scales
  1/c0 (lower level) and 1/c1 (reduced middle level), consuming analytic
  Hessian-vector products where the oracle provides them.

For NFD and AD, directional derivatives of the reduced maps grad_y fbar
and grad_x fbar along a y-direction v are taken with the lower-level
variable moved to first order along s = (dz/dy) v; differencing at frozen
z would converge to the partial (fixed-z) Hessian instead of the reduced
one, which is a different matrix whenever f2 or f3 couples y and z.

All evaluations inside one gradient computation receive the caller's
SampleSpec unchanged (fixed-sample contract).
"""

from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from .linalg import cg_solve, lu_factor_cached, lu_solve, solve_dense
from .oracle import DETERMINISTIC, Point, ProblemOracle, SampleSpec

Array = np.ndarray

ENGINE_H = "H"
ENGINE_NFD = "NFD"
ENGINE_AD = "AD"
ENGINES = (ENGINE_H, ENGINE_NFD, ENGINE_AD)


@dataclass
class AdjointConfig:
    """Approximation knobs for the adjoint engines.

    ``cg_max_iters=None`` resolves to 10x the system dimension per solve.
    ``c0`` and ``c1`` are the Lipschitz-style scaling constants of the
    lower-level Hessian and the reduced middle-level Hessian; the AD
    engine requires them (see :func:`auto_scales`).
    """

    engine: str = ENGINE_H
    fd_eps: float = 0.1
    cg_tol: float = 1e-8
    cg_max_iters: Optional[int] = None
    neumann_q: Optional[int] = None
    c0: Optional[float] = None
    c1: Optional[float] = None

    def __post_init__(self):
        if self.engine not in ENGINES:
            raise ValueError(f"unknown engine {self.engine!r}; expected one of {ENGINES}")
        if self.fd_eps <= 0:
            raise ValueError("fd_eps must be positive")
        if self.cg_tol <= 0:
            raise ValueError("cg_tol must be positive")

    def _require_ad(self, need_c1: bool):
        if self.neumann_q is None or self.neumann_q < 0:
            raise ValueError("AD engine requires a nonnegative neumann_q")
        if self.c0 is None or self.c0 <= 0:
            raise ValueError("AD engine requires a positive c0")
        if need_c1 and (self.c1 is None or self.c1 <= 0):
            raise ValueError("AD engine requires a positive c1")


def neumann_inverse_apply(
    hvp: Callable[[Array], Array], b, Q: int, scale: float
) -> Array:
    """Truncated-Neumann approximation of A^{-1} b.

    Runs the recurrence r_0 = b, r_{h+1} = r_h - scale * hvp(r_h) and
    returns scale * sum_{h=0..Q} r_h. Converges geometrically when
    |I - scale*A| < 1 (not enforced; the caller picks scale = 1/C with C
    an upper bound on |A|).
    """
    if Q < 0:
        raise ValueError("Q must be nonnegative")
    if scale <= 0:
        raise ValueError("scale must be positive")
    r = np.asarray(b, dtype=float)
    total = r.copy()
    for _ in range(Q):
        hv = np.asarray(hvp(r), dtype=float)
        if hv.shape != r.shape:
            raise ValueError("hvp output dimension mismatch")
        r = r - scale * hv
        total += r
    return scale * total


# ---------------------------------------------------------------------------
# engine plumbing


def _cg(apply_A, b, cfg: AdjointConfig, events, label: str) -> Array:
    max_iters = cfg.cg_max_iters if cfg.cg_max_iters is not None else 10 * len(b)
    report = cg_solve(apply_A, b, tol=cfg.cg_tol, max_iters=max_iters)
    if report.terminated_on_curvature and events is not None:
        events.append(f"cg_curvature:{label}")
    return report.solution


def _fd_dir(method, point: Point, sample, axis: str, v: Array, eps: float) -> Array:
    """Central difference of an oracle gradient along direction v in one
    variable block: approximates (d/d axis)(method) applied to v."""
    delta = eps * v
    if axis == "z":
        pp, pm = point.replace(z=point.z + delta), point.replace(z=point.z - delta)
    elif axis == "y":
        pp, pm = point.replace(y=point.y + delta), point.replace(y=point.y - delta)
    elif axis == "x":
        pp, pm = point.replace(x=point.x + delta), point.replace(x=point.x - delta)
    else:
        raise ValueError(f"unknown axis {axis!r}")
    return (np.asarray(method(pp, sample), float) - np.asarray(method(pm, sample), float)) / (2.0 * eps)


class _Ops:
    """Matrix-free primitives bound to (oracle, sample, cfg) for one engine."""

    def __init__(self, oracle, sample, cfg, events):
        self.oracle = oracle
        self.sample = sample
        self.cfg = cfg
        self.events = events

    def inv_zz(self, point, b, label) -> Array:
        raise NotImplementedError

    def hvp_yz(self, point, v) -> Array:
        raise NotImplementedError

    def hvp_xz(self, point, v) -> Array:
        raise NotImplementedError

    def hvp_zy(self, point, v) -> Array:
        # transposed cross product H_zy(f3) v; no oracle surface for it,
        # so both matrix-free engines difference grad_z f3 in y
        return _fd_dir(self.oracle.grad_z_f3, point, self.sample, "y", v, self.cfg.fd_eps)

    def ml_gradient(self, point) -> Array:
        o, s = self.oracle, self.sample
        w = self.inv_zz(point, np.asarray(o.grad_z_f2(point, s), float), "ml_w")
        return np.asarray(o.grad_y_f2(point, s), float) - self.hvp_yz(point, w)

    def x_gradient(self, point) -> Array:
        o, s = self.oracle, self.sample
        w = self.inv_zz(point, np.asarray(o.grad_z_f2(point, s), float), "gx_w")
        return np.asarray(o.grad_x_f2(point, s), float) - self.hvp_xz(point, w)

    def track_z(self, point, v) -> Array:
        """First-order motion of the lower-level solution under a
        y-perturbation v: solves Hzz s = -H_zy v."""
        rhs = self.hvp_zy(point, v)
        return -self.inv_zz(point, rhs, "track")

    def reduced_yy_apply(self, point, v) -> Array:
        """Hbar_yy v as a central difference of the middle-level adjoint
        gradient along (v, track_z(v))."""
        eps = self.cfg.fd_eps
        s_dir = self.track_z(point, v)
        pp = point.replace(y=point.y + eps * v, z=point.z + eps * s_dir)
        pm = point.replace(y=point.y - eps * v, z=point.z - eps * s_dir)
        return (self.ml_gradient(pp) - self.ml_gradient(pm)) / (2.0 * eps)

    def reduced_xy_apply(self, point, v) -> Array:
        """Hbar_xy v as a central difference of grad_x fbar along
        (v, track_z(v)); the two-evaluation form of the mixed partial."""
        eps = self.cfg.fd_eps
        s_dir = self.track_z(point, v)
        pp = point.replace(y=point.y + eps * v, z=point.z + eps * s_dir)
        pm = point.replace(y=point.y - eps * v, z=point.z - eps * s_dir)
        return (self.x_gradient(pp) - self.x_gradient(pm)) / (2.0 * eps)


class _NfdOps(_Ops):
    def _hvp_zz(self, point):
        o, s, eps = self.oracle, self.sample, self.cfg.fd_eps
        return lambda v: _fd_dir(o.grad_z_f3, point, s, "z", v, eps)

    def inv_zz(self, point, b, label):
        return _cg(self._hvp_zz(point), b, self.cfg, self.events, label)

    def hvp_yz(self, point, v):
        return _fd_dir(self.oracle.grad_y_f3, point, self.sample, "z", v, self.cfg.fd_eps)

    def hvp_xz(self, point, v):
        return _fd_dir(self.oracle.grad_x_f3, point, self.sample, "z", v, self.cfg.fd_eps)


def _guarded_neumann(hvp, b, Q, scale, events, label, growth_cap=10.0):
    """Neumann series with a divergence guard for the AD engine.

    Identical to :func:`neumann_inverse_apply` while the recursion
    contracts. If an iterate norm exceeds ``growth_cap`` times |b| (the
    scaled operator has left the contractive regime, e.g. a stale scale
    constant or a locally indefinite Hessian), accumulation stops at the
    last sane term; the truncated sum is a bounded, regularized inverse.
    """
    r = np.asarray(b, dtype=float)
    total = r.copy()
    cap = growth_cap * max(float(np.linalg.norm(b)), 1e-300)
    for h in range(Q):
        hv = np.asarray(hvp(r), dtype=float)
        r = r - scale * hv
        norm = float(np.linalg.norm(r))
        if not np.isfinite(norm) or norm > cap:
            if events is not None:
                events.append(f"neumann_truncated:{label}@{h + 1}")
            break
        total += r
    return scale * total


class _AdOps(_Ops):
    def _hvp_zz(self, point):
        o, s = self.oracle, self.sample
        if o.capabilities.has_hvp:
            return lambda v: np.asarray(o.hvp_zz_f3(point, s, v), float)
        eps = self.cfg.fd_eps
        return lambda v: _fd_dir(o.grad_z_f3, point, s, "z", v, eps)

    def inv_zz(self, point, b, label):
        return _guarded_neumann(
            self._hvp_zz(point), b, self.cfg.neumann_q, 1.0 / self.cfg.c0,
            self.events, label,
        )

    def hvp_yz(self, point, v):
        o = self.oracle
        if o.capabilities.has_hvp:
            return np.asarray(o.hvp_yz_f3(point, self.sample, v), float)
        return _fd_dir(o.grad_y_f3, point, self.sample, "z", v, self.cfg.fd_eps)

    def hvp_xz(self, point, v):
        o = self.oracle
        if o.capabilities.has_hvp:
            return np.asarray(o.hvp_xz_f3(point, self.sample, v), float)
        return _fd_dir(o.grad_x_f3, point, self.sample, "z", v, self.cfg.fd_eps)


def _make_ops(oracle, sample, cfg, events) -> _Ops:
    if cfg.engine == ENGINE_NFD:
        return _NfdOps(oracle, sample, cfg, events)
    if cfg.engine == ENGINE_AD:
        return _AdOps(oracle, sample, cfg, events)
    raise ValueError(f"no matrix-free ops for engine {cfg.engine!r}")


# ---------------------------------------------------------------------------
# public operations


def ml_adjoint_gradient(
    oracle: ProblemOracle,
    point: Point,
    sample: SampleSpec = DETERMINISTIC,
    cfg: AdjointConfig = None,
    events: Optional[list] = None,
) -> Array:
    """Adjoint gradient of the reduced middle-level objective in y,
    evaluated with point.z standing in for the exact lower-level solution."""
    cfg = cfg or AdjointConfig()
    if cfg.engine == ENGINE_H:
        if not oracle.capabilities.has_hessians:
            raise ValueError("H engine requires an oracle with Hessian blocks")
        lu = lu_factor_cached(oracle.hess_zz_f3(point, sample))
        w = lu_solve(*lu, np.asarray(oracle.grad_z_f2(point, sample), float))
        return np.asarray(oracle.grad_y_f2(point, sample), float) - oracle.hess_yz_f3(point, sample) @ w
    if cfg.engine == ENGINE_AD:
        cfg._require_ad(need_c1=False)
    return _make_ops(oracle, sample, cfg, events).ml_gradient(point)


def grad_x_fbar(
    oracle: ProblemOracle,
    point: Point,
    sample: SampleSpec = DETERMINISTIC,
    cfg: AdjointConfig = None,
    events: Optional[list] = None,
) -> Array:
    """x-gradient of the reduced middle-level objective:
    grad_x f2 - H_xz(f3) Hzz(f3)^{-1} grad_z f2."""
    cfg = cfg or AdjointConfig()
    if cfg.engine == ENGINE_H:
        if not oracle.capabilities.has_hessians:
            raise ValueError("H engine requires an oracle with Hessian blocks")
        lu = lu_factor_cached(oracle.hess_zz_f3(point, sample))
        w = lu_solve(*lu, np.asarray(oracle.grad_z_f2(point, sample), float))
        return np.asarray(oracle.grad_x_f2(point, sample), float) - oracle.hess_xz_f3(point, sample) @ w
    if cfg.engine == ENGINE_AD:
        cfg._require_ad(need_c1=False)
    return _make_ops(oracle, sample, cfg, events).x_gradient(point)


def ul_adjoint_gradient(
    oracle: ProblemOracle,
    point: Point,
    sample: SampleSpec = DETERMINISTIC,
    cfg: AdjointConfig = None,
    events: Optional[list] = None,
) -> Array:
    """Trilevel adjoint gradient of the reduced objective in x.

    Axes of inexactness are the caller's: point.y and point.z stand in
    for the exact inner solutions. CG curvature terminations are appended
    to ``events`` when a list is supplied.
    """
    cfg = cfg or AdjointConfig()
    if cfg.engine == ENGINE_H:
        return _ul_dense(oracle, point, sample, cfg)
    if cfg.engine == ENGINE_AD:
        cfg._require_ad(need_c1=True)
    ops = _make_ops(oracle, sample, cfg, events)
    o, s = oracle, sample

    lam_z = ops.inv_zz(point, np.asarray(o.grad_z_f1(point, s), float), "lam_z")
    b = np.asarray(o.grad_y_f1(point, s), float) - ops.hvp_yz(point, lam_z)

    if cfg.engine == ENGINE_NFD:
        lam_y = _cg(lambda v: ops.reduced_yy_apply(point, v), b, cfg, events, "lam_y")
    else:
        lam_y = _guarded_neumann(
            lambda v: ops.reduced_yy_apply(point, v), b, cfg.neumann_q, 1.0 / cfg.c1,
            events, "lam_y",
        )

    cross = ops.reduced_xy_apply(point, lam_y)
    return np.asarray(o.grad_x_f1(point, s), float) - ops.hvp_xz(point, lam_z) - cross


def _ul_dense(oracle, point, sample, cfg) -> Array:
    """Reference backend: dense assembly of the reduced Hessians from
    analytic Hessian blocks and third-order contractions, LU solves."""
    caps = oracle.capabilities
    if not caps.has_third_order:
        raise ValueError("H engine requires an oracle with third-order contractions")
    o, p, s = oracle, point, sample

    lu = lu_factor_cached(o.hess_zz_f3(p, s))

    def inv(B):
        return lu_solve(*lu, B)

    Hxz3 = np.asarray(o.hess_xz_f3(p, s), float)  # n x t
    Hyz3 = np.asarray(o.hess_yz_f3(p, s), float)  # m x t

    lam_z = inv(np.asarray(o.grad_z_f1(p, s), float))
    Jx = -inv(Hxz3.T)  # t x n, dz/dx on the solution manifold
    Jy = -inv(Hyz3.T)  # t x m
    w2 = inv(np.asarray(o.grad_z_f2(p, s), float))

    # derivative of the correction term -H_yz Hzz^{-1} grad_z f2 in x and y
    Bx = o.t3_zzx_f3_contract(p, s, w2) + o.t3_zzz_f3_contract(p, s, w2) @ Jx
    Cx = np.asarray(o.hess_zx_f2(p, s), float) + np.asarray(o.hess_zz_f2(p, s), float) @ Jx
    dx = -(o.t3_yzx_f3_contract(p, s, w2) + o.t3_yzz_f3_contract(p, s, w2) @ Jx) + Hyz3 @ inv(Bx - Cx)

    By = o.t3_zzy_f3_contract(p, s, w2) + o.t3_zzz_f3_contract(p, s, w2) @ Jy
    Cy = np.asarray(o.hess_zy_f2(p, s), float) + np.asarray(o.hess_zz_f2(p, s), float) @ Jy
    dy = -(o.t3_yzy_f3_contract(p, s, w2) + o.t3_yzz_f3_contract(p, s, w2) @ Jy) + Hyz3 @ inv(By - Cy)

    Hyx_bar = np.asarray(o.hess_yx_f2(p, s), float) + np.asarray(o.hess_yz_f2(p, s), float) @ Jx + dx
    Hyy_bar = np.asarray(o.hess_yy_f2(p, s), float) + np.asarray(o.hess_yz_f2(p, s), float) @ Jy + dy

    b = np.asarray(o.grad_y_f1(p, s), float) - Hyz3 @ lam_z
    lam_y = solve_dense(Hyy_bar, b)
    return np.asarray(o.grad_x_f1(p, s), float) - Hxz3 @ lam_z - Hyx_bar.T @ lam_y


def bilevel_adjoint_gradient(
    oracle: ProblemOracle,
    point: Point,
    sample: SampleSpec = DETERMINISTIC,
    cfg: AdjointConfig = None,
    events: Optional[list] = None,
) -> Array:
    """Adjoint gradient for the bilevel reduction with the lower level
    removed: min_x f1(x, y, z) s.t. y in argmin_y f2(x, y, z), at frozen z.

    grad = grad_x f1 - H_xy(f2) H_yy(f2)^{-1} grad_y f1.
    """
    cfg = cfg or AdjointConfig()
    o, p, s = oracle, point, sample
    gy1 = np.asarray(o.grad_y_f1(p, s), float)
    if cfg.engine == ENGINE_H:
        if not o.capabilities.has_hessians:
            raise ValueError("H engine requires an oracle with Hessian blocks")
        lam = solve_dense(o.hess_yy_f2(p, s), gy1)
        return np.asarray(o.grad_x_f1(p, s), float) - np.asarray(o.hess_yx_f2(p, s), float).T @ lam

    def hvp_yy(v):
        return _fd_dir(o.grad_y_f2, p, s, "y", v, cfg.fd_eps)

    if cfg.engine == ENGINE_NFD:
        lam = _cg(hvp_yy, gy1, cfg, events, "bilevel_lam")
    else:
        cfg._require_ad(need_c1=True)
        lam = _guarded_neumann(hvp_yy, gy1, cfg.neumann_q, 1.0 / cfg.c1, events, "bilevel_lam")
    cross = _fd_dir(o.grad_x_f2, p, s, "y", lam, cfg.fd_eps)
    return np.asarray(o.grad_x_f1(p, s), float) - cross


# ---------------------------------------------------------------------------
# AD scale calibration


def auto_scales(
    oracle: ProblemOracle,
    point: Point,
    sample: SampleSpec = DETERMINISTIC,
    neumann_q: int = 20,
    fd_eps: float = 0.1,
    power_iters: int = 5,
    seed: int = 0,
    c0: Optional[float] = None,
) -> tuple[float, float]:
    """Estimate the Neumann scaling constants (c0, c1) at a probe point.

    c0 doubles the max absolute row sum of a probe lower-level Hessian
    (or a power-iteration norm estimate when only HVPs are available);
    c1 doubles a power-iteration estimate of the reduced middle-level
    Hessian norm obtained through the AD engine's own operator. Pass an
    explicit ``c0`` to pin the lower-level scale and calibrate only c1;
    problems whose lower-level curvature at the probe point is degenerate
    (e.g. a cold-started adversarial perturbation problem) need this,
    since the probe-local estimate would make 1/c0 enormous.
    """
    caps = oracle.capabilities
    if c0 is None:
        if caps.has_hessians:
            Hzz = np.asarray(oracle.hess_zz_f3(point, sample), float)
            c0 = 2.0 * float(np.max(np.sum(np.abs(Hzz), axis=1)))
        else:
            hvp = (
                (lambda v: oracle.hvp_zz_f3(point, sample, v))
                if caps.has_hvp
                else (lambda v: _fd_dir(oracle.grad_z_f3, point, sample, "z", v, fd_eps))
            )
            c0 = 2.0 * _power_norm(hvp, point.z.size, power_iters, seed)

    cfg = AdjointConfig(
        engine=ENGINE_AD, fd_eps=fd_eps, neumann_q=neumann_q, c0=c0, c1=1.0
    )
    ops = _AdOps(oracle, sample, cfg, None)
    c1 = 2.0 * _power_norm(
        lambda v: ops.reduced_yy_apply(point, v), point.y.size, power_iters, seed
    )
    return c0, c1


def auto_scale_bilevel(
    oracle: ProblemOracle,
    point: Point,
    sample: SampleSpec = DETERMINISTIC,
    fd_eps: float = 0.1,
    power_iters: int = 5,
    seed: int = 0,
) -> float:
    """c1 for :func:`bilevel_adjoint_gradient`: doubles a power-iteration
    estimate of |H_yy(f2)| at a probe point."""
    est = _power_norm(
        lambda v: _fd_dir(oracle.grad_y_f2, point, sample, "y", v, fd_eps),
        point.y.size,
        power_iters,
        seed,
    )
    return 2.0 * est


def _power_norm(apply_A, dim, iters, seed) -> float:
    gen = np.random.default_rng(seed)
    v = gen.standard_normal(dim)
    v /= np.linalg.norm(v)
    est = 1.0
    for _ in range(iters):
        u = np.asarray(apply_A(v), float)
        est = float(np.linalg.norm(u))
        if est == 0.0 or not np.isfinite(est):
            return max(est, 1.0)
        v = u / est
    return est
