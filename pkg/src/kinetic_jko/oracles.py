"""Ground-truth oracles and error metrics.

Nothing here depends on the time-stepping code: the Gaussian oracle
integrates the moment ODE of the linear problem directly, and the
stationary oracle evaluates ``f∞ ∝ exp(-(|v|²/2 + φ(x))/T0)`` with a
quadrature normalizer.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import simpson

from .core import (ParticleEnsemble, QuadraticForm, QuadraticPlusCosine,
                   SelfConsistent, SelfConsistentFieldError, SinePeriodic,
                   SystemMatrices, eval_potential)

_LOG2PI = np.log(2 * np.pi)


# ---------------------------------------------------------------------------
# Gaussian moments


@dataclass(frozen=True)
class GaussianMoments:
    mu: np.ndarray
    C: np.ndarray

    def __post_init__(self):
        mu = np.array(self.mu, dtype=float).reshape(-1)
        C = np.array(self.C, dtype=float)
        if C.shape != (mu.size, mu.size):
            raise ValueError("C must be square and match mu")
        if not np.allclose(C, C.T, rtol=1e-12, atol=1e-12):
            raise ValueError("C must be symmetric")
        C = 0.5 * (C + C.T)
        if np.linalg.eigvalsh(C).min() <= 0:
            raise ValueError("C is not positive definite")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "C", C)


def _drift_matrix(K, D, J):
    return (np.asarray(D) + np.asarray(J)) @ np.linalg.inv(K)


def _rhs(mu, C, A, D, mu_tilde):
    AC = A @ C
    return -A @ (mu - mu_tilde), 2 * D - AC - AC.T


def moment_ode_rhs(m: GaussianMoments, K, D, J, mu_tilde=None):
    """``(dμ, dC)`` with ``A = (D+J)K⁻¹``: ``dμ = -A(μ-μ̃)``, ``dC = 2D - 2 Sym(AC)``."""
    K = np.asarray(K, dtype=float)
    if np.linalg.eigvalsh(0.5 * (K + K.T)).min() <= 0:
        raise np.linalg.LinAlgError("K must be symmetric positive definite")
    mt = np.zeros_like(m.mu) if mu_tilde is None else np.asarray(mu_tilde, float)
    return _rhs(m.mu, m.C, _drift_matrix(K, D, J), np.asarray(D, float), mt)


def _rk4(mu, C, A, D, mt, t, dt_ref):
    n = int(np.ceil(t / dt_ref - 1e-9))
    if n <= 0:
        return mu, C
    h = t / n
    for _ in range(n):
        k1 = _rhs(mu, C, A, D, mt)
        k2 = _rhs(mu + 0.5 * h * k1[0], C + 0.5 * h * k1[1], A, D, mt)
        k3 = _rhs(mu + 0.5 * h * k2[0], C + 0.5 * h * k2[1], A, D, mt)
        k4 = _rhs(mu + h * k3[0], C + h * k3[1], A, D, mt)
        mu = mu + h / 6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        C = C + h / 6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
    return mu, C


def integrate_moments(m0: GaussianMoments, K, D, J, t_final, dt_ref=1e-4, mu_tilde=None) -> GaussianMoments:
    """Classical RK4 on the moment ODE with step ``≤ dt_ref``."""
    K = np.asarray(K, float)
    D = np.asarray(D, float)
    mt = np.zeros_like(m0.mu) if mu_tilde is None else np.asarray(mu_tilde, float)
    mu, C = _rk4(m0.mu, m0.C, _drift_matrix(K, D, J), D, mt, float(t_final), dt_ref)
    try:
        return GaussianMoments(mu, 0.5 * (C + C.T))
    except ValueError as err:
        raise FloatingPointError(f"moment integration left the SPD cone: {err}") from err


def gaussian_logdensity(m: GaussianMoments, x, v) -> np.ndarray:
    z = np.hstack([np.atleast_2d(x), np.atleast_2d(v)])
    L = np.linalg.cholesky(m.C)
    y = np.linalg.solve(L, (z - m.mu).T).T
    return -0.5 * np.sum(y * y, axis=1) - np.log(np.diag(L)).sum() - 0.5 * z.shape[1] * _LOG2PI


def gaussian_score(m: GaussianMoments, x, v) -> np.ndarray:
    """``-C⁻¹(z-μ)`` per sample, shape ``(N, dim_x+dim_v)``."""
    z = np.hstack([np.atleast_2d(x), np.atleast_2d(v)])
    return -np.linalg.solve(m.C, (z - m.mu).T).T


# ---------------------------------------------------------------------------
# stationary density


def _factor_log_normalizer(potential, length, T0, n_panels):
    """log of ``∫exp(-φ₁(x)/T0)dx`` for the one-coordinate factor of φ."""
    if isinstance(potential, SinePeriodic):
        lo, hi = 0.0, float(length) if length else 2 * np.pi / potential.freq
    elif isinstance(potential, QuadraticPlusCosine):
        # exp(-a x²/2T0) is below 1e-40 outside this box
        half = np.sqrt(2 * 92.0 * T0 / potential.a) + 1.0
        lo, hi = -half, half
    else:
        raise TypeError(f"no quadrature rule for {type(potential).__name__}")
    xs = np.linspace(lo, hi, n_panels + 1)
    vals = eval_potential(potential, xs[:, None])
    shift = vals.min()
    return np.log(simpson(np.exp(-(vals - shift) / T0), x=xs)) - shift / T0, (lo, hi)


@dataclass(frozen=True)
class StationaryDensity:
    """``f∞(x, v) = exp(-(|v|²/2 + φ(x))/T0) / Z``.

    Separable potentials are normalized by composite Simpson on one
    coordinate (``n_panels`` panels); quadratic forms analytically.
    """

    potential: object
    dim_x: int = 1
    dim_v: int = 1
    T0: float = 1.0
    length: float | None = None
    n_panels: int = 8192
    log_normalizer: float = field(init=False)
    x_box: tuple = field(init=False, default=None)
    _factor: float = field(init=False, repr=False, default=0.0)

    def __post_init__(self):
        pot = self.potential
        if isinstance(pot, SelfConsistent):
            raise SelfConsistentFieldError("no closed-form stationary density for a self-consistent field")
        if self.n_panels < 4096 or self.n_panels % 2:
            raise ValueError("use an even panel count of at least 4096")
        lv = 0.5 * self.dim_v * np.log(2 * np.pi * self.T0)
        if isinstance(pot, QuadraticForm):
            Kx = pot.K_inv[:self.dim_x, :self.dim_x] / self.T0
            lx = 0.5 * self.dim_x * _LOG2PI - 0.5 * np.linalg.slogdet(Kx)[1]
            box = None
        else:
            f1, box = _factor_log_normalizer(pot, self.length, self.T0, self.n_panels)
            object.__setattr__(self, "_factor", f1)
            lx = self.dim_x * f1
        object.__setattr__(self, "x_box", box)
        object.__setattr__(self, "log_normalizer", float(lx + lv))

    def logdensity(self, x, v):
        x, v = np.atleast_2d(x), np.atleast_2d(v)
        h = 0.5 * np.sum(v * v, axis=1) + eval_potential(self.potential, x)
        return -h / self.T0 - self.log_normalizer

    def position_marginal(self, y):
        """Density of one position coordinate (separable potentials only)."""
        y = np.asarray(y, dtype=float).reshape(-1)
        if isinstance(self.potential, QuadraticForm):
            if self.dim_x != 1:
                raise ValueError("use the Gaussian oracle for coupled quadratic forms")
            var = self.T0 / self.potential.K_inv[0, 0]
            return np.exp(-0.5 * (y - self.potential.mu_tilde[0]) ** 2 / var) / np.sqrt(2 * np.pi * var)
        return np.exp(-eval_potential(self.potential, y[:, None]) / self.T0 - self._factor)

    def velocity_marginal(self, w):
        w = np.asarray(w, dtype=float)
        return np.exp(-0.5 * w * w / self.T0) / np.sqrt(2 * np.pi * self.T0)

    @property
    def energy(self) -> float:
        """``E∞ = -T0 log Z``, the minimum of the discrete energy functional."""
        return -self.T0 * self.log_normalizer


def stationary_logdensity(s: StationaryDensity, x, v) -> np.ndarray:
    return s.logdensity(x, v)


# ---------------------------------------------------------------------------
# metrics


def drift_residual(u, v1, score_v) -> np.ndarray:
    """Per-particle ``u + v' + ∇_v log f_exact(z')``."""
    return np.asarray(u) + np.asarray(v1) + np.asarray(score_v)


def drift_error(ensemble_before, ensemble_after, params, fm, exact_score_v) -> float:
    """``sqrt(mean |u_θ(zⁿ) + v^{n+1} + ∇_v log f_exact(z^{n+1})|²)``.

    ``exact_score_v(x, v)`` returns the velocity block of the exact score at
    ``t^{n+1}``.  The formula carries no ε; rescale for presets with ε ≠ 1.
    """
    from .nn import mlp_forward
    if exact_score_v is None:
        raise ValueError("no exact score registered")
    u = mlp_forward(params, fm, ensemble_before.positions, ensemble_before.velocities)
    x1, v1 = ensemble_after.positions, ensemble_after.velocities
    r = drift_residual(u, v1, exact_score_v(x1, v1))
    return float(np.sqrt(np.mean(np.sum(r * r, axis=1))))


def optimality_residual(u, v1, score_v, epsilon=1.0) -> float:
    """``mean |u + εv' + ε∇_v log f_exact(z')|`` (mean of norms)."""
    r = np.asarray(u) + epsilon * (np.asarray(v1) + np.asarray(score_v))
    return float(np.mean(np.linalg.norm(r, axis=1)))


def discrete_energy(ensemble: ParticleEnsemble, potential, T0=1.0) -> float:
    v = ensemble.velocities
    return float(np.mean(0.5 * np.sum(v * v, axis=1) + eval_potential(potential, ensemble.positions)
                         + T0 * ensemble.log_density))


def kl_mc(ensemble: ParticleEnsemble, reference_logdensity) -> float:
    """``mean[log fⁿ(z_p) - log f_ref(z_p)]`` over the tracked log-densities."""
    if callable(reference_logdensity):
        ref = reference_logdensity(ensemble.positions, ensemble.velocities)
    else:
        ref = np.asarray(reference_logdensity)
    return float(np.mean(ensemble.log_density - ref))


def marginal_histogram(samples, n_bins=160, range=None):
    """Density-normalized histogram; returns ``(density, edges)``."""
    samples = np.asarray(samples, dtype=float).reshape(-1)
    if samples.size == 0:
        raise ValueError("empty sample set")
    dens, edges = np.histogram(samples, bins=n_bins, range=range)
    width = np.diff(edges)
    return dens / (samples.size * width), edges


def bin_averaged(pdf, edges, sub=64):
    """Average of a density over each histogram bin (Simpson on ``sub`` panels)."""
    out = np.empty(edges.size - 1)
    for i in np.arange(edges.size - 1):
        xs = np.linspace(edges[i], edges[i + 1], sub + 1)
        out[i] = simpson(pdf(xs), x=xs) / (edges[i + 1] - edges[i])
    return out


def marginal_l1_gap(samples, pdf, n_bins, range):
    """L1 distance between a histogram and the bin-averaged exact density.

    Mass outside ``range`` counts fully toward the gap on both sides.
    """
    samples = np.asarray(samples, float).reshape(-1)
    counts, edges = np.histogram(samples, bins=n_bins, range=range)
    w = np.diff(edges)
    emp = counts / samples.size
    exact = bin_averaged(pdf, edges) * w
    outside_emp = 1.0 - emp.sum()
    outside_exact = max(0.0, 1.0 - exact.sum())
    return float(np.abs(emp - exact).sum() + abs(outside_emp - outside_exact))


# ---------------------------------------------------------------------------
# registry by preset


class GaussianOracle:
    """Exact solution of the linear problem with Gaussian data."""

    def __init__(self, preset, epsilon=None, T0=None, dt_ref=1e-4):
        pot = preset.potential
        if not isinstance(pot, QuadraticForm) or preset.initial["kind"] != "gaussian":
            raise TypeError("the Gaussian oracle needs a quadratic form and Gaussian data")
        eps = preset.defaults["epsilon"] if epsilon is None else epsilon
        self.T0 = preset.defaults["T0"] if T0 is None else T0
        d = preset.domain.dim_x
        sm = SystemMatrices.build(d, eps, self.T0)
        self.dim_x, self.dim_v = d, preset.domain.dim_v
        # the temperature scales the diffusion, so the fixed point is (μ̃, T0·K)
        self.K, self.J, self.D = pot.K, sm.J, sm.D * self.T0
        self.mu_tilde = pot.mu_tilde
        self.m0 = GaussianMoments(preset.initial["mean"], preset.initial["cov"])
        self.dt_ref = dt_ref
        self.stationary = StationaryDensity(pot, d, self.dim_v, self.T0)
        self._A = _drift_matrix(self.K, self.D, self.J)
        self._t, self._mu, self._C = 0.0, self.m0.mu, self.m0.C

    def moments(self, t) -> GaussianMoments:
        """Moments at ``t``; sequential queries reuse the previous endpoint."""
        if t < self._t:
            self._t, self._mu, self._C = 0.0, self.m0.mu, self.m0.C
        self._mu, self._C = _rk4(self._mu, self._C, self._A, self.D, self.mu_tilde, t - self._t, self.dt_ref)
        self._t = t
        return GaussianMoments(self._mu, 0.5 * (self._C + self._C.T))

    def score_v(self, t):
        m = self.moments(t)
        return lambda x, v: gaussian_score(m, x, v)[:, self.dim_x:]

    def diagnose(self, step, t, before, result, rec):
        if result is None:
            rec.kl = kl_mc(before, self.stationary.logdensity)
            return
        ens = result.ensemble
        rec.kl = kl_mc(ens, self.stationary.logdensity)
        m = self.moments(t)
        x1, v1 = ens.positions, ens.velocities
        r = drift_residual(result.control, v1, gaussian_score(m, x1, v1)[:, self.dim_x:])
        rec.drift_error = float(np.sqrt(np.mean(np.sum(r * r, axis=1))))

    def initial_kl(self, ens):
        return kl_mc(ens, self.stationary.logdensity)


class StationaryOracle:
    """KL against the closed-form equilibrium."""

    def __init__(self, preset, T0=None):
        self.T0 = preset.defaults["T0"] if T0 is None else T0
        d = preset.domain
        self.stationary = StationaryDensity(preset.potential, d.dim_x, d.dim_v, self.T0, d.length)

    def diagnose(self, step, t, before, result, rec):
        ens = before if result is None else result.ensemble
        rec.kl = kl_mc(ens, self.stationary.logdensity)

    def initial_kl(self, ens):
        return kl_mc(ens, self.stationary.logdensity)


def oracle_for(preset, epsilon=None, T0=None):
    """Registered oracle for a preset, or ``None`` for self-consistent fields."""
    from .presets import load_preset
    preset = load_preset(preset)
    if isinstance(preset.potential, SelfConsistent):
        return None
    if isinstance(preset.potential, QuadraticForm) and preset.initial["kind"] == "gaussian":
        return GaussianOracle(preset, epsilon, T0)
    return StationaryOracle(preset, T0)
