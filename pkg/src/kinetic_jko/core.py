"""Phase-space domain types shared by every solver component.

Positions are stored as ``(N, dim_x)`` arrays, velocities as ``(N, dim_v)``
and the tracked log-density as ``(N,)``.  All value objects are frozen
dataclasses; arrays are made read-only on construction so an ensemble can
be handed between steps without defensive copies.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np


class SelfConsistentFieldError(ValueError):
    """Raised when a closed-form potential is requested for a PIC-driven field."""


class NonFiniteError(FloatingPointError):
    """A NaN/Inf appeared in a per-particle quantity.

    ``index`` is the first offending particle (or ``None`` when the fault is
    not attributable to one particle, e.g. a parameter gradient).
    ``iteration`` is set by the inner optimizer.
    """

    def __init__(self, message, index=None, iteration=None):
        super().__init__(message)
        self.index = index
        self.iteration = iteration


def first_nonfinite(*arrays) -> int | None:
    """Index of the first particle row holding a non-finite entry, if any."""
    bad = None
    for a in arrays:
        a = np.asarray(a)
        rows = ~np.isfinite(a.reshape(a.shape[0], -1)).all(axis=1)
        if rows.any():
            i = int(np.argmax(rows))
            bad = i if bad is None else min(bad, i)
    return bad


def _frozen(a, ndim):
    a = np.array(a, dtype=float)
    if ndim == 2 and a.ndim == 1:
        a = a[:, None]
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class DomainSpec:
    """Phase-space geometry: ``length=None`` means an unbounded x-domain."""

    dim_x: int = 1
    dim_v: int = 1
    length: float | None = None

    def __post_init__(self):
        if self.dim_x < 1 or self.dim_v < 1:
            raise ValueError("dim_x and dim_v must be positive")
        if self.length is not None and not self.length > 0:
            raise ValueError("periodic length must be positive")

    @property
    def periodic(self) -> bool:
        return self.length is not None

    def wrap(self, x: np.ndarray) -> np.ndarray:
        """Map positions into ``[0, L)``; identity on unbounded domains."""
        if self.length is None:
            return x
        y = np.mod(x, self.length)
        # mod can round up to exactly L for tiny negative inputs
        return np.where(y >= self.length, 0.0, y)


@dataclass(frozen=True)
class ParticleEnsemble:
    positions: np.ndarray
    velocities: np.ndarray
    log_density: np.ndarray
    domain: DomainSpec = field(default_factory=DomainSpec)

    def __post_init__(self):
        x = _frozen(self.positions, 2)
        v = _frozen(self.velocities, 2)
        lf = _frozen(self.log_density, 1).reshape(-1)
        lf.setflags(write=False)
        object.__setattr__(self, "positions", x)
        object.__setattr__(self, "velocities", v)
        object.__setattr__(self, "log_density", lf)
        n = x.shape[0]
        if v.shape[0] != n or lf.shape[0] != n:
            raise ValueError(f"array lengths differ: {x.shape[0]}, {v.shape[0]}, {lf.shape[0]}")
        if x.shape[1] != self.domain.dim_x or v.shape[1] != self.domain.dim_v:
            raise ValueError("array widths do not match the domain dimensions")
        bad = first_nonfinite(x, v, lf)
        if bad is not None:
            raise NonFiniteError(f"non-finite state at particle {bad}", index=bad)
        if self.domain.periodic and (x.min() < 0 or x.max() >= self.domain.length):
            raise ValueError("periodic positions must lie in [0, L)")

    @property
    def n_particles(self) -> int:
        return self.positions.shape[0]

    @property
    def weight(self) -> float:
        return 1.0 / self.n_particles

    def replace(self, positions=None, velocities=None, log_density=None) -> "ParticleEnsemble":
        return ParticleEnsemble(
            self.positions if positions is None else positions,
            self.velocities if velocities is None else velocities,
            self.log_density if log_density is None else log_density,
            self.domain,
        )


# ---------------------------------------------------------------------------
# potentials


@dataclass(frozen=True)
class QuadraticForm:
    """Hamiltonian ``½(z-μ̃)ᵀK⁻¹(z-μ̃)`` with ``z=(x, v)``.

    The velocity block of ``K⁻¹`` must be the identity with no x-v coupling
    (and ``μ̃_v = 0``) so that the form splits as ``|v|²/2 + φ(x)``.
    """

    K_inv: np.ndarray
    mu_tilde: np.ndarray

    def __post_init__(self):
        K_inv = np.array(self.K_inv, dtype=float)
        mu = np.array(self.mu_tilde, dtype=float).reshape(-1)
        n = K_inv.shape[0]
        if K_inv.shape != (n, n) or n % 2 or mu.shape != (n,):
            raise ValueError("K_inv must be square of even size matching mu_tilde")
        if not np.allclose(K_inv, K_inv.T):
            raise ValueError("K_inv must be symmetric")
        if np.linalg.eigvalsh(K_inv).min() <= 0:
            raise ValueError("K_inv must be positive definite")
        d = n // 2
        if not (np.allclose(K_inv[d:, d:], np.eye(d)) and np.allclose(K_inv[:d, d:], 0)
                and np.allclose(mu[d:], 0)):
            raise ValueError("QuadraticForm must split as |v|^2/2 + phi(x)")
        K_inv.setflags(write=False)
        mu.setflags(write=False)
        object.__setattr__(self, "K_inv", K_inv)
        object.__setattr__(self, "mu_tilde", mu)

    @property
    def dim_x(self) -> int:
        return self.K_inv.shape[0] // 2

    @property
    def K(self) -> np.ndarray:
        return np.linalg.inv(self.K_inv)

    def value(self, x):
        d = self.dim_x
        y = np.atleast_2d(x) - self.mu_tilde[:d]
        return 0.5 * np.einsum("ni,ij,nj->n", y, self.K_inv[:d, :d], y)

    def gradient(self, x):
        d = self.dim_x
        y = np.atleast_2d(x) - self.mu_tilde[:d]
        return y @ self.K_inv[:d, :d]


@dataclass(frozen=True)
class QuadraticPlusCosine:
    """``a|x|²/2 + b Σ cos(2π x_i)``."""

    a: float = 1.0
    b: float = 1.0

    def value(self, x):
        x = np.atleast_2d(x)
        return 0.5 * self.a * np.sum(x * x, axis=1) + self.b * np.sum(np.cos(2 * np.pi * x), axis=1)

    def gradient(self, x):
        x = np.atleast_2d(x)
        return self.a * x - 2 * np.pi * self.b * np.sin(2 * np.pi * x)


@dataclass(frozen=True)
class SinePeriodic:
    """``amp Σ sin(freq x_i)``."""

    amp: float = 0.2
    freq: float = 2 * np.pi

    def value(self, x):
        return self.amp * np.sum(np.sin(self.freq * np.atleast_2d(x)), axis=1)

    def gradient(self, x):
        return self.amp * self.freq * np.cos(self.freq * np.atleast_2d(x))


@dataclass(frozen=True)
class SelfConsistent:
    """Marker: the force comes from the PIC field solve."""


PotentialSpec = QuadraticForm | QuadraticPlusCosine | SinePeriodic | SelfConsistent


def eval_potential(spec: PotentialSpec, x) -> np.ndarray:
    if isinstance(spec, SelfConsistent):
        raise SelfConsistentFieldError("self-consistent potential: the PIC module supplies the field")
    return spec.value(x)


def eval_potential_gradient(spec: PotentialSpec, x) -> np.ndarray:
    """Return ``∇φ(x)`` for a closed-form potential, shape ``(N, dim_x)``."""
    if isinstance(spec, SelfConsistent):
        raise SelfConsistentFieldError("self-consistent potential: the PIC module supplies the field")
    return spec.gradient(x)


# ---------------------------------------------------------------------------
# structure matrices and configuration


@dataclass(frozen=True)
class SystemMatrices:
    J: np.ndarray
    D: np.ndarray
    epsilon: float
    T0: float = 1.0

    @classmethod
    def build(cls, dim: int, epsilon: float, T0: float = 1.0) -> "SystemMatrices":
        if epsilon < 0 or T0 <= 0:
            raise ValueError("need epsilon >= 0 and T0 > 0")
        eye, zero = np.eye(dim), np.zeros((dim, dim))
        J = np.block([[zero, -eye], [eye, zero]])
        D = np.block([[zero, zero], [zero, epsilon * eye]])
        return cls(J, D, float(epsilon), float(T0))


class Variant(str, Enum):
    """Ordering of the constrained particle update."""

    ALGORITHM_ONE = "algorithm_one"
    SYMPLECTIC_EULER = "symplectic_euler"
    STORMER_VERLET = "stormer_verlet"


@dataclass(frozen=True)
class JkoConfig:
    dt: float = 0.1
    n_steps: int = 1
    inner_iters: int = 100
    learning_rate: float = 1e-3
    warm_start: bool = True
    seed: int = 0
    symplectic_variant: Variant = Variant.ALGORITHM_ONE
    epsilon: float = 1.0
    T0: float = 1.0
    split: bool = False

    def __post_init__(self):
        if not self.dt > 0 or self.n_steps < 1 or self.inner_iters < 1 or not self.learning_rate > 0:
            raise ValueError("dt, n_steps, inner_iters and learning_rate must be positive")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        object.__setattr__(self, "symplectic_variant", Variant(self.symplectic_variant))

    @staticmethod
    def steps_for(t_final: float, dt: float) -> int:
        """``ceil(T/Δt)`` robust to representation error (``8/0.1`` is 80, not 81)."""
        return int(np.ceil(t_final / dt - 1e-9))
