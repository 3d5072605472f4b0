"""Particle-in-cell coupling for the Vlasov-Poisson-Fokker-Planck system.

The mesh is cell-centred, ``x_i = (i + 1/2)dx``, periodic on ``[0, L)``.
Deposition and interpolation share the tent shape function, so they are
adjoint to each other.  The Poisson solve is spectral and drops the k=0
mode, which requires the source ``ρ - h`` to have zero mean.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import JkoConfig, NonFiniteError, ParticleEnsemble, first_nonfinite
from .scheme import (DiagnosticsRecord, RunResult, StepProblem, _solve,
                     config_from, init_key, network_for)
from .nn import init_params


@dataclass(frozen=True)
class GridField1D:
    values: np.ndarray
    length: float
    dx: float = field(init=False)

    def __post_init__(self):
        vals = np.array(self.values, dtype=float).reshape(-1)
        if vals.size < 2:
            raise ValueError("need at least two cells")
        if not self.length > 0:
            raise ValueError("length must be positive")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "dx", self.length / vals.size)

    @property
    def n_cells(self) -> int:
        return self.values.size

    @property
    def centers(self) -> np.ndarray:
        return (np.arange(self.n_cells) + 0.5) * self.dx

    @classmethod
    def zeros(cls, n_cells: int, length: float) -> "GridField1D":
        return cls(np.zeros(n_cells), length)


def tent_basis(z, dx):
    return np.maximum(0.0, 1.0 - np.abs(z) / dx)


def _stencil(positions, n_cells, length):
    """Left neighbour index and the weight on the right neighbour."""
    x = np.asarray(positions, dtype=float).reshape(-1)
    if x.size and (x.min() < 0 or x.max() >= length or not np.isfinite(x).all()):
        raise ValueError("positions must be wrapped into [0, L)")
    dx = length / n_cells
    s = x / dx - 0.5
    i0 = np.floor(s)
    w1 = s - i0
    i0 = i0.astype(np.int64) % n_cells
    return i0, (i0 + 1) % n_cells, w1


def deposit_density(positions, grid_or_cells, length=None) -> GridField1D:
    """Number density with total mass 1: ``Σ_i ρ_i dx = 1``."""
    if isinstance(grid_or_cells, GridField1D):
        n_cells, length = grid_or_cells.n_cells, grid_or_cells.length
    else:
        n_cells = int(grid_or_cells)
    x = np.asarray(positions, dtype=float).reshape(-1)
    if x.size == 0:
        raise ValueError("no particles to deposit")
    i0, i1, w1 = _stencil(x, n_cells, length)
    dx = length / n_cells
    # bincount accumulates in index order, so the scatter is deterministic
    rho = (np.bincount(i0, weights=1.0 - w1, minlength=n_cells)
           + np.bincount(i1, weights=w1, minlength=n_cells)) / (x.size * dx)
    return GridField1D(rho, length)


def wavenumbers(n_cells: int, length: float) -> np.ndarray:
    return 2 * np.pi * np.fft.rfftfreq(n_cells, d=length / n_cells)


def solve_poisson_spectral(rho: GridField1D, h: float, tol=1e-10):
    """``-φ'' = ρ - h`` with zero-mean gauge; returns ``(φ, E = -φ')``."""
    n = rho.n_cells
    if n % 2:
        raise ValueError("the spectral solver expects an even number of cells")
    src = rho.values - h
    if abs(src.mean()) > tol * max(1.0, abs(h)):
        raise ValueError(f"neutrality violated: mean(rho) - h = {src.mean():.3e}")
    k = wavenumbers(n, rho.length)
    s_hat = np.fft.rfft(src)
    phi_hat = np.zeros_like(s_hat)
    phi_hat[1:] = s_hat[1:] / k[1:] ** 2
    E_hat = -1j * k * phi_hat
    # the Nyquist derivative of a real signal is not representable; drop it
    E_hat[-1] = 0.0
    phi = np.fft.irfft(phi_hat, n)
    E = np.fft.irfft(E_hat, n)
    return GridField1D(phi, rho.length), GridField1D(E, rho.length)


def spectral_laplacian(f: GridField1D) -> np.ndarray:
    k = wavenumbers(f.n_cells, f.length)
    return np.fft.irfft(-(k ** 2) * np.fft.rfft(f.values), f.n_cells)


def interpolate_field(E: GridField1D, positions) -> np.ndarray:
    i0, i1, w1 = _stencil(positions, E.n_cells, E.length)
    return (1.0 - w1) * E.values[i0] + w1 * E.values[i1]


def field_energy(E: GridField1D) -> float:
    return float(np.sum(E.values ** 2) * E.dx)


def neutral_density(positions, n_cells, length, normalization="mass"):
    """Deposit and fix the background so the k=0 mode vanishes exactly.

    ``"mass"`` keeps ``Σρdx = 1`` with background ``h = 1/L``; ``"unit"``
    rescales the density to mean 1 with ``h = 1``.
    """
    rho = deposit_density(positions, n_cells, length)
    vals = rho.values
    if normalization == "unit":
        h = 1.0
        vals = vals * length
    elif normalization == "mass":
        h = 1.0 / length
    else:
        raise ValueError(f"unknown density normalization {normalization!r}")
    # remove round-off drift of the mean before the solve
    vals = vals - (vals.mean() - h)
    return GridField1D(vals, length), h


def field_at_particles(positions, n_cells, length, normalization="mass"):
    rho, h = neutral_density(positions, n_cells, length, normalization)
    phi, E = solve_poisson_spectral(rho, h)
    return interpolate_field(E, positions), rho, phi, E


# ---------------------------------------------------------------------------
# PIC-JKO step


def vpfp_problem(ensemble: ParticleEnsemble, n_cells: int, dt, epsilon, T0=1.0,
                 normalization="mass") -> StepProblem:
    """Free-stream, solve the field at the new positions, then set up the proximal step."""
    dom = ensemble.domain
    if not dom.periodic or dom.dim_x != 1:
        raise ValueError("the PIC step needs a 1D periodic domain")
    x, v, lf = ensemble.positions, ensemble.velocities, ensemble.log_density
    n = ensemble.n_particles
    x1 = dom.wrap(x + v[:, :1] * dt)
    Ep, rho, phi, E = field_at_particles(x1[:, 0], n_cells, dom.length, normalization)
    bad = first_nonfinite(Ep)
    if bad is not None:
        raise NonFiniteError(f"non-finite field at particle {bad}", index=bad)
    fe = field_energy(E)
    v_kick = v.copy()
    # the field only pushes the first velocity component
    v_kick[:, 0] += Ep * dt

    def closure(u, div, sl):
        v1 = v_kick[sl] + u * dt
        terms = 0.5 * dt * np.sum(u * u, axis=1) + epsilon * (
            0.5 * np.sum(v1 * v1, axis=1) + T0 * (lf[sl] - dt * div))
        return terms, dt * u + epsilon * dt * v1, np.full(u.shape[0], -epsilon * T0 * dt)

    def commit(u, div):
        v1 = v_kick + u * dt
        lf1 = lf - dt * div
        bad = first_nonfinite(v1, lf1)
        if bad is not None:
            raise NonFiniteError(f"non-finite update at particle {bad}", index=bad)
        return ensemble.replace(x1, v1, lf1)

    # the field term is fixed once the positions have moved
    return StepProblem(x, v, closure, commit, fe,
                       {"field_energy": fe, "rho": rho, "phi": phi, "E": E})


def vpfp_jko_step(ensemble, n_cells, params_prev, fm, config: JkoConfig, normalization="mass"):
    """One PIC-JKO step; the result's ``extra`` holds the grid fields and energy."""
    prob = vpfp_problem(ensemble, n_cells, config.dt, config.epsilon, config.T0, normalization)
    return _solve(prob, params_prev, fm, config)


def phase_histogram(ensemble, bins=(128, 128), vrange=(-3.0, 3.0)):
    """Density histogram of ``(x, v₁)`` over ``[0, L) × vrange``."""
    L = ensemble.domain.length
    H, ex, ev = np.histogram2d(ensemble.positions[:, 0], ensemble.velocities[:, 0],
                               bins=bins, range=[[0.0, L], list(vrange)])
    area = (ex[1] - ex[0]) * (ev[1] - ev[0])
    return H / (ensemble.n_particles * area), ex, ev


def initial_field_energy(ensemble, n_cells, normalization="mass"):
    _, _, _, E = field_at_particles(ensemble.positions[:, 0], n_cells, ensemble.domain.length,
                                    normalization)
    return field_energy(E)


def run_vpfp(preset, params: dict | None = None, *, ensemble=None, progress=None) -> RunResult:
    """March the PIC-JKO scheme; field energy every step, histograms every ``snapshot_every``."""
    from .presets import load_preset, sample_initial_ensemble

    preset = load_preset(preset)
    params = preset.with_overrides(None) if params is None else params
    config = config_from(params, preset.n_steps(params))
    n_cells = int(params["n_cells"])
    norm = params["density_normalization"]
    if ensemble is None:
        ensemble = sample_initial_ensemble(preset, int(params["n_particles"]), config.seed,
                                           velocity_sampling=params["velocity_sampling"],
                                           n_cells=n_cells, T0=config.T0)
    arch, fm = network_for(params, preset.domain.dim_x, preset.domain.dim_v)
    bins = params["histogram_bins"]
    bins = tuple(bins) if isinstance(bins, (list, tuple)) else (bins, bins)
    vrange = tuple(params["histogram_vrange"])
    every = int(params["snapshot_every"])

    theta0 = init_params(arch, init_key(config.seed), params["init_scheme"])
    p = theta0
    init = DiagnosticsRecord(0, 0.0, field_energy=initial_field_energy(ensemble, n_cells, norm))
    records, hists = [], [(0, 0.0, *phase_histogram(ensemble, bins, vrange))]
    for n in range(config.n_steps):
        start = p if (config.warm_start or n == 0) else theta0
        res = vpfp_jko_step(ensemble, n_cells, start, fm, config, norm)
        t = (n + 1) * config.dt
        rec = DiagnosticsRecord(n + 1, t, res.final_inner_loss, field_energy=res.extra["field_energy"])
        records.append(rec)
        ensemble, p = res.ensemble, res.trained_params
        if every and (n + 1) % every == 0:
            hists.append((n + 1, t, *phase_histogram(ensemble, bins, vrange)))
        if progress is not None:
            progress(rec)
    return RunResult(records, init, ensemble, p, fm, [], hists)
