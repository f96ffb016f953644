"""Derivative-evaluation contract for trilevel problems.

Every problem exposes values, gradients, and (optionally) Hessian blocks,
Hessian-vector products, and third-order contractions of its three
objectives through a :class:`ProblemOracle`. Evaluations are parameterized
by a sample descriptor so the same interface serves deterministic,
minibatch, and synthetic-noise regimes.

Randomness is counter-based: a noise draw is a pure function of
(seed, stream, counter, evaluated point), so runs are bit-reproducible
regardless of evaluation order or concurrency.
"""

from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np

from .linalg import as_vector

Array = np.ndarray

_MASK64 = (1 << 64) - 1


# ---------------------------------------------------------------------------
# points and sample descriptors


@dataclass(frozen=True)
class Point:
    """The (x, y, z) triple of upper/middle/lower-level variable vectors.

    Construction converts to 1-d float arrays; finiteness is enforced at
    operation boundaries (gradient steps, solves, objective evaluations)
    rather than per construction, since points are built once per inner
    step in the hot loops.
    """

    x: Array
    y: Array
    z: Array

    def __post_init__(self):
        for name in ("x", "y", "z"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.ndim != 1:
                raise ValueError(f"{name} must be 1-d, got shape {arr.shape}")
            object.__setattr__(self, name, arr)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.x.size, self.y.size, self.z.size

    def replace(self, x=None, y=None, z=None) -> "Point":
        return Point(
            self.x if x is None else x,
            self.y if y is None else y,
            self.z if z is None else z,
        )


@dataclass(frozen=True)
class Deterministic:
    """Full-data / noise-free evaluation."""


@dataclass(frozen=True)
class MinibatchIndices:
    """Evaluation restricted to the given dataset rows (1/|batch| scaling)."""

    indices: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "indices", tuple(int(i) for i in self.indices))
        if len(self.indices) == 0:
            raise ValueError("minibatch must contain at least one index")


@dataclass(frozen=True)
class NoiseDraw:
    """Synthetic-noise evaluation keyed by a reproducible (stream, counter) pair."""

    stream: int
    counter: int


SampleSpec = Union[Deterministic, MinibatchIndices, NoiseDraw]

DETERMINISTIC = Deterministic()


@dataclass(frozen=True)
class OracleCapabilities:
    has_hessians: bool = False
    has_third_order: bool = False
    has_hvp: bool = False

    def __post_init__(self):
        if self.has_third_order and not self.has_hessians:
            raise ValueError("third-order capability requires Hessian capability")


class ProblemOracle:
    """Base class for derivative oracles.

    Required: f1/f2/f3 values and all nine gradient blocks. Optional
    methods (Hessian blocks, HVPs, third-order contractions) raise
    NotImplementedError unless the subclass advertises them via
    ``capabilities``. All evaluations take (point, sample) and must be
    deterministic functions of their arguments.
    """

    capabilities = OracleCapabilities()

    @property
    def dims(self) -> tuple[int, int, int]:
        raise NotImplementedError

    # values -------------------------------------------------------------
    def f1(self, point: Point, sample: SampleSpec) -> float:
        raise NotImplementedError

    def f2(self, point: Point, sample: SampleSpec) -> float:
        raise NotImplementedError

    def f3(self, point: Point, sample: SampleSpec) -> float:
        raise NotImplementedError

    # gradients ----------------------------------------------------------
    def grad_x_f1(self, point, sample) -> Array:
        raise NotImplementedError

    def grad_y_f1(self, point, sample) -> Array:
        raise NotImplementedError

    def grad_z_f1(self, point, sample) -> Array:
        raise NotImplementedError

    def grad_x_f2(self, point, sample) -> Array:
        raise NotImplementedError

    def grad_y_f2(self, point, sample) -> Array:
        raise NotImplementedError

    def grad_z_f2(self, point, sample) -> Array:
        raise NotImplementedError

    def grad_x_f3(self, point, sample) -> Array:
        raise NotImplementedError

    def grad_y_f3(self, point, sample) -> Array:
        raise NotImplementedError

    def grad_z_f3(self, point, sample) -> Array:
        raise NotImplementedError

    # Hessian blocks (optional; capabilities.has_hessians) ----------------
    def hess_zz_f3(self, point, sample) -> Array:
        raise NotImplementedError

    def hess_xz_f3(self, point, sample) -> Array:
        raise NotImplementedError

    def hess_yz_f3(self, point, sample) -> Array:
        raise NotImplementedError

    def hess_zx_f2(self, point, sample) -> Array:
        raise NotImplementedError

    def hess_zy_f2(self, point, sample) -> Array:
        raise NotImplementedError

    def hess_zz_f2(self, point, sample) -> Array:
        raise NotImplementedError

    def hess_yx_f2(self, point, sample) -> Array:
        raise NotImplementedError

    def hess_yy_f2(self, point, sample) -> Array:
        raise NotImplementedError

    def hess_yz_f2(self, point, sample) -> Array:
        raise NotImplementedError

    # Hessian-vector products (optional; capabilities.has_hvp) ------------
    def hvp_zz_f3(self, point, sample, v) -> Array:
        raise NotImplementedError

    def hvp_xz_f3(self, point, sample, v) -> Array:
        raise NotImplementedError

    def hvp_yz_f3(self, point, sample, v) -> Array:
        raise NotImplementedError

    # third-order contractions (optional; capabilities.has_third_order) ---
    # Each contracts the middle (lower-level) index of the named tensor
    # with a t-vector and returns the resulting matrix.
    def t3_yzx_f3_contract(self, point, sample, v) -> Array:
        raise NotImplementedError

    def t3_yzz_f3_contract(self, point, sample, v) -> Array:
        raise NotImplementedError

    def t3_zzx_f3_contract(self, point, sample, v) -> Array:
        raise NotImplementedError

    def t3_zzz_f3_contract(self, point, sample, v) -> Array:
        raise NotImplementedError

    def t3_yzy_f3_contract(self, point, sample, v) -> Array:
        raise NotImplementedError

    def t3_zzy_f3_contract(self, point, sample, v) -> Array:
        raise NotImplementedError


def fd_hvp(grad: Callable[[Array], Array], at, v, eps: float) -> Array:
    """Central-difference Hessian-vector product.

    Returns [grad(at + eps*v) - grad(at - eps*v)] / (2*eps). Exact for
    gradients that are affine in the perturbed variable.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    at = as_vector(at, "at")
    v = as_vector(v, "v")
    if at.size != v.size:
        raise ValueError("direction dimension does not match base point")
    gp = np.asarray(grad(at + eps * v), dtype=float)
    gm = np.asarray(grad(at - eps * v), dtype=float)
    return (gp - gm) / (2.0 * eps)


# ---------------------------------------------------------------------------
# counter-based randomness


def splitmix64(*words: int) -> int:
    """Mix integer words into one 64-bit value (SplitMix64 finalizer chain)."""
    state = 0x9E3779B97F4A7C15
    for w in words:
        state = (state + (int(w) & _MASK64) + 0x9E3779B97F4A7C15) & _MASK64
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        state = z ^ (z >> 31)
    return state


def stream_gen(seed: int, *tags: int) -> np.random.Generator:
    """Counter-based generator for the (seed, tags...) stream.

    Built on Philox so identical keys give identical draws independent of
    call order; safe to construct concurrently.
    """
    key = (int(seed) & _MASK64, splitmix64(*tags) if tags else 0)
    return np.random.Generator(np.random.Philox(key=key))


def _digest_array(arr: Array) -> int:
    return splitmix64(*np.frombuffer(np.ascontiguousarray(arr, dtype=float).tobytes(), dtype=np.uint64))


def _point_digest(point: Point) -> int:
    return splitmix64(_digest_array(point.x), _digest_array(point.y), _digest_array(point.z))


# block tags keep noise draws independent across derivative blocks
_BLOCK_TAGS = {
    name: idx
    for idx, name in enumerate(
        [
            "grad_x_f1", "grad_y_f1", "grad_z_f1",
            "grad_x_f2", "grad_y_f2", "grad_z_f2",
            "grad_x_f3", "grad_y_f3", "grad_z_f3",
            "hess_zz_f3", "hess_xz_f3", "hess_yz_f3",
            "hess_zx_f2", "hess_zy_f2", "hess_zz_f2",
            "hess_yx_f2", "hess_yy_f2", "hess_yz_f2",
            "hvp_zz_f3", "hvp_xz_f3", "hvp_yz_f3",
        ]
    )
}


class GaussianNoiseOracle(ProblemOracle):
    """Adds zero-mean Gaussian noise to an inner oracle's derivatives.

    On NoiseDraw samples, every gradient gets i.i.d. N(0, std_grad^2)
    elementwise and every Hessian block / HVP result gets N(0, std_hess^2);
    third-order contractions and function values pass through unperturbed.
    Deterministic samples bypass noise entirely.

    The per-call generator is keyed by (seed, stream, counter, block,
    point), so repeated evaluation of the same block at the same point and
    sample is bit-identical, while distinct points or blocks draw
    independent noise (a finite difference of noisy gradients is itself
    noisy, as it would be with sampled data).
    """

    def __init__(self, inner: ProblemOracle, std_grad: float, std_hess: float, seed: int):
        if std_grad < 0 or std_hess < 0:
            raise ValueError("noise standard deviations must be nonnegative")
        self.inner = inner
        self.std_grad = float(std_grad)
        self.std_hess = float(std_hess)
        self.seed = int(seed)
        self.capabilities = inner.capabilities

    @property
    def dims(self):
        return self.inner.dims

    def _gen(self, sample: NoiseDraw, block: str, point: Point, extra: int = 0):
        key = (self.seed & _MASK64, splitmix64(sample.stream, _BLOCK_TAGS[block]))
        counter = [
            int(sample.counter) & _MASK64,
            _point_digest(point),
            int(extra) & _MASK64,
            0,
        ]
        return np.random.Generator(np.random.Philox(key=key, counter=counter))

    def _noisy(self, name: str, point, sample, std: float, extra_digest: int = 0):
        clean = getattr(self.inner, name)(point, sample)
        if not isinstance(sample, NoiseDraw) or std == 0.0:
            return clean
        gen = self._gen(sample, name, point, extra_digest)
        return clean + gen.normal(0.0, std, size=np.shape(clean))

    # values pass through
    def f1(self, point, sample):
        return self.inner.f1(point, sample)

    def f2(self, point, sample):
        return self.inner.f2(point, sample)

    def f3(self, point, sample):
        return self.inner.f3(point, sample)


def _install_noise_methods():
    def grad_method(name):
        def method(self, point, sample):
            return self._noisy(name, point, sample, self.std_grad)

        method.__name__ = name
        return method

    def hess_method(name):
        def method(self, point, sample):
            return self._noisy(name, point, sample, self.std_hess)

        method.__name__ = name
        return method

    def hvp_method(name):
        def method(self, point, sample, v):
            clean = getattr(self.inner, name)(point, sample, v)
            if not isinstance(sample, NoiseDraw) or self.std_hess == 0.0:
                return clean
            gen = self._gen(sample, name, point, _digest_array(np.asarray(v, dtype=float)))
            return clean + gen.normal(0.0, self.std_hess, size=np.shape(clean))

        method.__name__ = name
        return method

    def passthrough(name):
        def method(self, point, sample, v):
            return getattr(self.inner, name)(point, sample, v)

        method.__name__ = name
        return method

    for block in _BLOCK_TAGS:
        if block.startswith("grad_"):
            setattr(GaussianNoiseOracle, block, grad_method(block))
        elif block.startswith("hess_"):
            setattr(GaussianNoiseOracle, block, hess_method(block))
        elif block.startswith("hvp_"):
            setattr(GaussianNoiseOracle, block, hvp_method(block))
    for t3 in [
        "t3_yzx_f3_contract", "t3_yzz_f3_contract", "t3_zzx_f3_contract",
        "t3_zzz_f3_contract", "t3_yzy_f3_contract", "t3_zzy_f3_contract",
    ]:
        setattr(GaussianNoiseOracle, t3, passthrough(t3))


_install_noise_methods()


def wrap_gaussian_noise(
    inner: ProblemOracle, std_grad: float, std_hess: float, seed: int
) -> ProblemOracle:
    """Wrap a deterministic-capable oracle with Gaussian derivative noise."""
    return GaussianNoiseOracle(inner, std_grad, std_hess, seed)
