"""Run orchestration: resolved configs, artifact writing, convergence sweeps."""
from __future__ import annotations

import json
import platform
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .core import SelfConsistent
from .presets import load_preset

METHODS = ("kinetic_jko", "split_jko", "score_baseline")
LINEAR_HEADER = ("step", "time", "loss", "energy", "kl", "drift_error")
FIELD_HEADER = ("step", "time", "field_energy", "loss")


def fmt(x) -> str:
    """17 significant digits; empty cell for a missing value."""
    if x is None:
        return ""
    return format(float(x), ".17g")


def parse_overrides(items) -> dict:
    """``["dt=0.05", "hidden=[32, 32]"]`` -> typed dict (values parsed as YAML scalars)."""
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ValueError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        out[key.strip()] = yaml.safe_load(raw)
    return out


@dataclass
class RunConfig:
    preset: str
    overrides: dict = field(default_factory=dict)
    output_dir: str | Path | None = None
    snapshot_every: int | None = None
    method: str = "kinetic_jko"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {METHODS}")
        load_preset(self.preset)

    def resolve(self):
        preset = load_preset(self.preset)
        over = dict(self.overrides)
        if self.snapshot_every is not None:
            over["snapshot_every"] = self.snapshot_every
        return preset, preset.with_overrides(over)


# ---------------------------------------------------------------------------
# writers


def write_diagnostics(path, result, field=False):
    header = FIELD_HEADER if field else LINEAR_HEADER
    rows = [result.initial] + list(result.records)
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for r in rows:
            fh.write(",".join([str(r.step)] + [fmt(getattr(r, k)) for k in header[1:]]) + "\n")


def write_snapshot(path, ens, time):
    """Header ``N_p,<N>,dim_x,<dx>,dim_v,<dv>,time,<t>`` then rows ``x..., v..., log_f``."""
    dom = ens.domain
    with open(path, "w", newline="\n") as fh:
        fh.write(f"N_p,{ens.n_particles},dim_x,{dom.dim_x},dim_v,{dom.dim_v},time,{fmt(time)}\n")
        data = np.hstack([ens.positions, ens.velocities, ens.log_density[:, None]])
        for row in data:
            fh.write(",".join(fmt(c) for c in row) + "\n")


def read_snapshot(path):
    from .core import DomainSpec, ParticleEnsemble  # noqa: F401
    with open(path) as fh:
        head = fh.readline().strip().split(",")
    meta = dict(zip(head[::2], head[1::2]))
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    dx, dv = int(meta["dim_x"]), int(meta["dim_v"])
    return meta, data[:, :dx], data[:, dx:dx + dv], data[:, dx + dv]


def write_histogram(path, time, H, ex, ev):
    with open(path, "w", newline="\n") as fh:
        fh.write(f"t,{fmt(time)},nx,{H.shape[0]},nv,{H.shape[1]},vmin,{fmt(ev[0])},vmax,{fmt(ev[-1])}\n")
        for row in H:
            fh.write(",".join(fmt(c) for c in row) + "\n")


def manifest_for(config: RunConfig, params: dict) -> dict:
    return {
        "preset": config.preset,
        "method": config.method,
        "seed": params["seed"],
        "overrides": config.overrides,
        "resolved": params,
        "code_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
    }


def config_from_manifest(path) -> RunConfig:
    with open(path) as fh:
        m = json.load(fh)
    return RunConfig(m["preset"], m["resolved"], None, None, m["method"])


# ---------------------------------------------------------------------------
# execution


def execute(config: RunConfig, progress=None):
    """Run without writing anything; returns ``(result, params, is_field_run)``."""
    preset, params = config.resolve()
    if isinstance(preset.potential, SelfConsistent):
        if config.method != "kinetic_jko":
            raise ValueError(f"method {config.method!r} is not available for self-consistent presets")
        from .pic import run_vpfp
        return run_vpfp(preset, params, progress=progress), params, True
    if config.method == "score_baseline":
        from .baselines import run_score_baseline
        return run_score_baseline(preset, params, progress=progress), params, False
    from .scheme import run_linear
    return run_linear(preset, params, split=config.method == "split_jko", progress=progress), params, False


def run(config: RunConfig, progress=None):
    """Execute and emit ``diagnostics.csv``, ``snapshots/`` and ``manifest.json``."""
    if config.output_dir is None:
        raise ValueError("output_dir is required")
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    result, params, is_field = execute(config, progress)
    write_diagnostics(out / "diagnostics.csv", result, field=is_field)
    snap = out / "snapshots"
    snap.mkdir(exist_ok=True)
    for step, t, ens in result.snapshots:
        write_snapshot(snap / f"particles_{step:06d}.csv", ens, t)
    for step, t, H, ex, ev in result.histograms:
        write_histogram(snap / f"phase_{step:06d}.csv", t, H, ex, ev)
    if result.params is not None:
        from .nn import params_to_array
        np.savetxt(out / "params_final.txt", params_to_array(result.params, result.fm), fmt="%.17g")
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest_for(config, params), fh, indent=2, sort_keys=True)
    return result


# ---------------------------------------------------------------------------
# convergence sweeps


def fit_slope(dts, errors) -> float:
    """Least-squares slope of ``log(error)`` against ``log(dt)``."""
    dts, errors = np.asarray(dts, float), np.asarray(errors, float)
    if dts.size < 2:
        raise ValueError("need at least two step sizes for a slope")
    return float(np.polyfit(np.log(dts), np.log(errors), 1)[0])


@dataclass
class SweepTable:
    rows: list          # (dt, mean time-averaged drift error, stderr, n_seeds)
    slope: float | None
    per_run: dict       # (dt, seed) -> time-averaged drift error


def convergence_sweep(preset, dt_list, seeds, overrides=None, method="kinetic_jko",
                      output_dir=None, progress=None) -> SweepTable:
    """One run per ``(dt, seed)``; table of time-averaged drift errors and fitted slope."""
    from .oracles import GaussianOracle, oracle_for
    p = load_preset(preset)
    if not isinstance(oracle_for(p), GaussianOracle):
        raise ValueError(f"preset {p.id} has no exact-score oracle")
    per_run, rows = {}, []
    for dt in dt_list:
        errs = []
        for seed in seeds:
            over = {**(overrides or {}), "dt": float(dt), "seed": int(seed)}
            result, _, _ = execute(RunConfig(p.id, over, None, None, method))
            e = float(np.mean([r.drift_error for r in result.records]))
            per_run[(float(dt), int(seed))] = e
            errs.append(e)
            if progress is not None:
                progress(dt, seed, e)
        errs = np.asarray(errs)
        se = float(errs.std(ddof=1) / np.sqrt(errs.size)) if errs.size > 1 else 0.0
        rows.append((float(dt), float(errs.mean()), se, int(errs.size)))
    slope = fit_slope([r[0] for r in rows], [r[1] for r in rows]) if len(rows) > 1 else None
    table = SweepTable(rows, slope, per_run)
    if output_dir is not None:
        out = Path(output_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "sweep.csv", "w", newline="\n") as fh:
            fh.write("dt,mean_drift_error,stderr,n_seeds\n")
            for dt, m, se, n in rows:
                fh.write(f"{fmt(dt)},{fmt(m)},{fmt(se)},{n}\n")
        with open(out / "manifest.json", "w") as fh:
            json.dump({"preset": p.id, "dts": [float(d) for d in dt_list], "seeds": list(seeds),
                       "overrides": overrides or {}, "method": method, "slope": slope,
                       "code_version": __version__}, fh, indent=2, sort_keys=True)
    return table
