"""Comparison methods: per-step score-based transport and the velocity-matching objective."""
from __future__ import annotations

import numpy as np

from .core import NonFiniteError, ParticleEnsemble, eval_potential_gradient, first_nonfinite
from .nn import (AdamState, FeatureMap, MlpParams, adam_step, forward_with_divergence,
                 init_params, input_jacobian, loss_gradient, mlp_forward)
from .scheme import (DiagnosticsRecord, RunResult, StepResult, config_from, init_key,
                     network_for)


def _score_closure(u, div, sl):
    return np.sum(u * u, axis=1) + 2.0 * div, 2.0 * u, np.full(u.shape[0], 2.0)


def implicit_score_loss(score_params: MlpParams, fm: FeatureMap, ensemble: ParticleEnsemble) -> float:
    """``mean[|s_θ|² + 2∇_v·s_θ]``; equals ``E|s_θ - ∇_v log f|²`` up to a θ-free constant."""
    s, div = forward_with_divergence(score_params, fm, ensemble.positions, ensemble.velocities)
    terms = np.sum(s * s, axis=1) + 2.0 * div
    if not np.isfinite(terms).all():
        bad = first_nonfinite(terms[:, None])
        raise NonFiniteError(f"non-finite score loss at particle {bad}", index=bad)
    return float(np.mean(terms))


def train_score(ensemble, params: MlpParams, fm: FeatureMap, iters: int, learning_rate: float):
    """Adam on the implicit score loss; returns ``(params, trace)``."""
    state = AdamState.zeros(params.flat.size, learning_rate)
    trace = []
    for k in range(iters):
        try:
            loss, grad = loss_gradient(params, fm, ensemble.positions, ensemble.velocities, _score_closure)
        except NonFiniteError as err:
            err.iteration = k
            raise
        trace.append(loss)
        params, state = adam_step(state, params, grad)
    return params, trace


def score_drift(score_params, fm, x, v, epsilon):
    """Dissipative velocity field ``-ε(v + s_θ)`` and its divergence."""
    s, div = forward_with_divergence(score_params, fm, x, v)
    return -epsilon * (v + s), -epsilon * (v.shape[1] + div)


def score_transport_step(ensemble: ParticleEnsemble, potential, score_params, fm, dt, epsilon=1.0):
    """Kick-drift transport with the score drift; returns ``(ensemble', drift)``.

    ``v' = v - ∇φ(x)Δt - ε(v + s_θ)Δt``, ``x' = x + v'Δt`` and
    ``log f' = log f + εΔt(dim_v + ∇_v·s_θ)``.
    """
    x, v, lf = ensemble.positions, ensemble.velocities, ensemble.log_density
    w, dw = score_drift(score_params, fm, x, v, epsilon)
    v1 = v - eval_potential_gradient(potential, x) * dt + w * dt
    x1 = ensemble.domain.wrap(x + v1 * dt)
    lf1 = lf - dt * dw
    bad = first_nonfinite(x1, v1, lf1)
    if bad is not None:
        raise NonFiniteError(f"non-finite update at particle {bad}", index=bad)
    return ensemble.replace(x1, v1, lf1), w


def run_score_baseline(preset, params: dict | None = None, *, oracle=None, ensemble=None,
                       progress=None) -> RunResult:
    """Per-step score training followed by transport; same diagnostics as the JKO march."""
    from .oracles import discrete_energy, oracle_for
    from .presets import load_preset, sample_initial_ensemble

    preset = load_preset(preset)
    params = preset.with_overrides(None) if params is None else params
    config = config_from(params, preset.n_steps(params))
    pot = preset.potential
    if ensemble is None:
        ensemble = sample_initial_ensemble(preset, int(params["n_particles"]), config.seed,
                                           velocity_sampling=params["velocity_sampling"],
                                           n_cells=int(params["n_cells"]), T0=config.T0)
    arch, fm = network_for(params, preset.domain.dim_x, preset.domain.dim_v)
    oracle = oracle_for(preset, config.epsilon, config.T0) if oracle is None else oracle
    theta0 = init_params(arch, init_key(config.seed), params["init_scheme"])
    p = theta0
    init = DiagnosticsRecord(0, 0.0, None, discrete_energy(ensemble, pot, config.T0))
    if oracle is not None:
        oracle.diagnose(0, 0.0, ensemble, None, init)
    records, snaps = [], []
    every = int(params["snapshot_every"])
    if every:
        snaps.append((0, 0.0, ensemble))
    for n in range(config.n_steps):
        start = p if (config.warm_start or n == 0) else theta0
        p, trace = train_score(ensemble, start, fm, config.inner_iters, config.learning_rate)
        new, w = score_transport_step(ensemble, pot, p, fm, config.dt, config.epsilon)
        t = (n + 1) * config.dt
        rec = DiagnosticsRecord(n + 1, t, implicit_score_loss(p, fm, ensemble),
                                discrete_energy(new, pot, config.T0))
        if oracle is not None:
            oracle.diagnose(n + 1, t, ensemble, StepResult(new, p, rec.loss, trace, w), rec)
        records.append(rec)
        ensemble = new
        if every and (n + 1) % every == 0:
            snaps.append((n + 1, t, ensemble))
        if progress is not None:
            progress(rec)
    return RunResult(records, init, ensemble, p, fm, snaps)


# ---------------------------------------------------------------------------
# velocity matching (evaluation only)


def velocity_matching_objective(params: MlpParams, fm: FeatureMap, ensemble: ParticleEnsemble,
                                potential) -> float:
    """θ-dependent part of the velocity-matching functional.

    The network outputs ``(u^x, u^v)`` of widths ``(dim_x, dim_v)``; the
    value is the empirical mean of
    ``|u^x|² - 2u^x·v + |u^v|² + 2u^v·∇φ - 2u^v·v + 2∇_v·u^x - 2∇_x·u^v + 2∇_v·u^v``.
    """
    x, v = ensemble.positions, ensemble.velocities
    dx, dv = x.shape[1], v.shape[1]
    if dx != dv:
        raise ValueError("velocity matching needs dim_x == dim_v")
    if params.arch.widths[-1] != dx + dv:
        raise ValueError("the network must output (u^x, u^v)")
    out = mlp_forward(params, fm, x, v)
    ux, uv = out[:, :dx], out[:, dx:]
    jx, jv = input_jacobian(params, fm, x, v)
    i = np.arange(dx)
    div_v_ux = jv[:, i, i].sum(axis=1)
    div_x_uv = jx[:, i, dx + i].sum(axis=1)
    div_v_uv = jv[:, i, dx + i].sum(axis=1)
    grad_phi = eval_potential_gradient(potential, x)
    terms = (np.sum(ux * ux, axis=1) - 2 * np.sum(ux * v, axis=1) + np.sum(uv * uv, axis=1)
             + 2 * np.sum(uv * grad_phi, axis=1) - 2 * np.sum(uv * v, axis=1)
             + 2 * div_v_ux - 2 * div_x_uv + 2 * div_v_uv)
    if not np.isfinite(terms).all():
        bad = first_nonfinite(terms[:, None])
        raise NonFiniteError(f"non-finite objective term at particle {bad}", index=bad)
    return float(np.mean(terms))
