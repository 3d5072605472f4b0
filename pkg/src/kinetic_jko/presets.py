"""Experiment presets and deterministic initial sampling.

Each preset is a YAML record in ``presets/<id>.yaml`` with exactly the
top-level fields ``domain``, ``potential``, ``initial`` and ``defaults``.
``defaults`` is merged over :data:`GLOBAL_DEFAULTS`; its key set is also the
set of names accepted as run overrides.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass
from importlib import resources

import numpy as np
import yaml

from .core import (DomainSpec, JkoConfig, ParticleEnsemble, QuadraticForm,
                   QuadraticPlusCosine, SelfConsistent, SinePeriodic)

GLOBAL_DEFAULTS = {
    "n_particles": 2000,
    "dt": 0.1,
    "t_final": 1.0,
    "n_steps": None,
    "epsilon": 1.0,
    "T0": 1.0,
    "hidden": [16, 16],
    "activation": "tanh",
    "alpha": 0.01,
    "feature_omega": None,
    "inner_iters": 100,
    "learning_rate": 1e-3,
    "warm_start": True,
    "init_scheme": "uniform",
    "seed": 0,
    "symplectic_variant": "algorithm_one",
    "n_cells": 128,
    "density_normalization": "mass",
    "velocity_sampling": "mixture",
    "snapshot_every": 10,
    "histogram_bins": 160,
    "histogram_vrange": [-3.0, 3.0],
    "energy_slack": None,
}

TOP_LEVEL = ("domain", "potential", "initial", "defaults")


@dataclass(frozen=True)
class Preset:
    id: str
    domain: DomainSpec
    potential: object
    initial: dict
    defaults: dict
    raw: dict

    def n_steps(self, params=None) -> int:
        p = self.defaults if params is None else params
        if p.get("n_steps"):
            return int(p["n_steps"])
        return JkoConfig.steps_for(p["t_final"], p["dt"])

    def with_overrides(self, overrides: dict | None) -> dict:
        """Defaults with ``overrides`` applied; unknown keys are rejected."""
        params = copy.deepcopy(self.defaults)
        for key, val in (overrides or {}).items():
            if key not in params:
                raise KeyError(f"unknown override key {key!r} for preset {self.id}")
            params[key] = val
        return params


def build_potential(spec: dict):
    kind = spec["kind"]
    if kind == "quadratic_form":
        return QuadraticForm(np.array(spec["K_inv"], float), np.array(spec["mu_tilde"], float))
    if kind == "quadratic_plus_cosine":
        return QuadraticPlusCosine(float(spec["a"]), float(spec["b"]))
    if kind == "sine_periodic":
        return SinePeriodic(float(spec["amp"]), float(spec["freq"]))
    if kind == "self_consistent":
        return SelfConsistent()
    raise ValueError(f"unknown potential kind {kind!r}")


def preset_from_dict(preset_id: str, raw: dict) -> Preset:
    if sorted(raw) != sorted(TOP_LEVEL):
        raise ValueError(f"preset {preset_id}: top-level fields must be exactly {TOP_LEVEL}")
    unknown = set(raw["defaults"]) - set(GLOBAL_DEFAULTS)
    if unknown:
        raise ValueError(f"preset {preset_id}: unknown defaults {sorted(unknown)}")
    d = raw["domain"]
    domain = DomainSpec(int(d["dim_x"]), int(d["dim_v"]), d.get("length"))
    defaults = {**copy.deepcopy(GLOBAL_DEFAULTS), **copy.deepcopy(raw["defaults"])}
    return Preset(preset_id, domain, build_potential(raw["potential"]),
                  copy.deepcopy(raw["initial"]), defaults, copy.deepcopy(raw))


def list_presets() -> list[str]:
    files = resources.files("kinetic_jko") / "presets"
    return sorted(p.name[:-5] for p in files.iterdir() if p.name.endswith(".yaml"))


def load_preset(preset_id: str) -> Preset:
    if isinstance(preset_id, Preset):
        return preset_id
    path = resources.files("kinetic_jko") / "presets" / f"{preset_id}.yaml"
    if not path.is_file():
        raise KeyError(f"unknown preset {preset_id!r}; known: {', '.join(list_presets())}")
    return preset_from_dict(preset_id, yaml.safe_load(path.read_text()))


# ---------------------------------------------------------------------------
# initial densities

_LOG2PI = np.log(2 * np.pi)


def _gauss_logpdf(z, mean, cov):
    L = np.linalg.cholesky(cov)
    y = np.linalg.solve(L, (z - mean).T).T
    return -0.5 * np.sum(y * y, axis=1) - np.log(np.diag(L)).sum() - 0.5 * z.shape[1] * _LOG2PI


def _cosine_norm(amp, k, L):
    # ∫_0^L (1 + amp cos kx) dx
    return L + amp * np.sin(k * L) / k


def initial_log_density(preset: Preset, x, v, velocity_sampling="mixture", T0=1.0):
    """Analytic ``log f⁰(x, v)`` for the preset's initial condition."""
    ini = preset.initial
    x, v = np.atleast_2d(x), np.atleast_2d(v)
    if ini["kind"] == "gaussian":
        return _gauss_logpdf(np.hstack([x, v]), np.array(ini["mean"], float), np.array(ini["cov"], float))
    pos, vel = ini["position"], ini["velocity"]
    if pos["kind"] == "normal":
        m, s = float(pos["mean"]), float(pos["std"])
        lx = np.sum(-0.5 * ((x - m) / s) ** 2 - np.log(s) - 0.5 * _LOG2PI, axis=1)
    elif pos["kind"] == "cosine":
        a, k, L = float(pos["amplitude"]), float(pos["wavenumber"]), preset.domain.length
        lx = np.sum(np.log1p(a * np.cos(k * x)) - np.log(_cosine_norm(a, k, L)), axis=1)
    else:
        raise ValueError(f"unknown position profile {pos['kind']!r}")
    if velocity_sampling == "gaussian":
        s = np.sqrt(T0)
        lv = np.sum(-0.5 * (v / s) ** 2 - np.log(s) - 0.5 * _LOG2PI, axis=1)
    elif vel["kind"] == "beams":
        s, st = float(vel["sigma"]), float(vel["transverse_sigma"])
        comps = [-0.5 * ((v[:, 0] - c) / s) ** 2 for c in vel["centers"]]
        lv = (np.logaddexp.reduce(comps, axis=0) - np.log(len(comps))
              - np.log(s) - 0.5 * _LOG2PI)
        if v.shape[1] > 1:
            lv = lv + np.sum(-0.5 * (v[:, 1:] / st) ** 2 - np.log(st) - 0.5 * _LOG2PI, axis=1)
    elif vel["kind"] == "normal":
        s = float(vel["std"])
        lv = np.sum(-0.5 * (v / s) ** 2 - np.log(s) - 0.5 * _LOG2PI, axis=1)
    else:
        raise ValueError(f"unknown velocity profile {vel['kind']!r}")
    return lx + lv


def _sample_positions(pos, domain, n_cells, n, rng):
    dx_dim = domain.dim_x
    if pos["kind"] == "normal":
        return float(pos["mean"]) + float(pos["std"]) * rng.standard_normal((n, dx_dim))
    if pos["kind"] != "cosine":
        raise ValueError(f"unknown position profile {pos['kind']!r}")
    # inverse-transform sampling of the profile on cell centers, then in-cell jitter
    L = domain.length
    dx = L / n_cells
    centers = (np.arange(n_cells) + 0.5) * dx
    pmf = 1.0 + float(pos["amplitude"]) * np.cos(float(pos["wavenumber"]) * centers)
    cdf = np.cumsum(pmf / pmf.sum())
    cdf[-1] = 1.0
    out = np.empty((n, dx_dim))
    for j in range(dx_dim):
        u = rng.random(n)
        idx = np.searchsorted(cdf, u, side="left")
        out[:, j] = centers[idx] + (rng.random(n) - 0.5) * dx
    return domain.wrap(out)


def _sample_velocities(vel, dim_v, n, rng, velocity_sampling, T0):
    if velocity_sampling == "gaussian":
        return np.sqrt(T0) * rng.standard_normal((n, dim_v))
    if vel["kind"] == "normal":
        return float(vel["std"]) * rng.standard_normal((n, dim_v))
    if vel["kind"] != "beams":
        raise ValueError(f"unknown velocity profile {vel['kind']!r}")
    centers = np.asarray(vel["centers"], float)
    which = rng.integers(0, len(centers), size=n)
    out = float(vel["transverse_sigma"]) * rng.standard_normal((n, dim_v))
    out[:, 0] = centers[which] + float(vel["sigma"]) * rng.standard_normal(n)
    return out


def sample_initial_ensemble(preset, n_particles: int, seed: int, *,
                            velocity_sampling: str | None = None, n_cells: int | None = None,
                            T0: float | None = None) -> ParticleEnsemble:
    """Draw ``n_particles`` from the preset's f⁰ and attach analytic ``log f⁰``.

    Draws come from a Philox (counter-based) stream keyed by ``seed`` in a
    fixed order, so the result is bitwise reproducible.
    """
    preset = load_preset(preset)
    if n_particles < 1:
        raise ValueError("need at least one particle")
    velocity_sampling = velocity_sampling or preset.defaults["velocity_sampling"]
    n_cells = n_cells or preset.defaults["n_cells"]
    T0 = preset.defaults["T0"] if T0 is None else T0
    rng = np.random.Generator(np.random.Philox(key=seed))
    dom, ini = preset.domain, preset.initial
    if ini["kind"] == "gaussian":
        mean = np.asarray(ini["mean"], float)
        Lc = np.linalg.cholesky(np.asarray(ini["cov"], float))
        z = mean + rng.standard_normal((n_particles, mean.size)) @ Lc.T
        x, v = z[:, :dom.dim_x], z[:, dom.dim_x:]
        x = dom.wrap(x)
    elif ini["kind"] == "product":
        x = _sample_positions(ini["position"], dom, n_cells, n_particles, rng)
        v = _sample_velocities(ini["velocity"], dom.dim_v, n_particles, rng, velocity_sampling, T0)
    else:
        raise ValueError(f"unknown initial kind {ini['kind']!r}")
    lf = initial_log_density(preset, x, v, velocity_sampling, T0)
    return ParticleEnsemble(x, v, lf, dom)
