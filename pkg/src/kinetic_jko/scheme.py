"""Per-step constrained minimization and the outer march for closed-form potentials.

Every step variant is expressed as a :class:`StepProblem`: the network
inputs, a closure giving the loss and its partials with respect to the
network output ``u`` and its velocity divergence, and a commit function
mapping ``(u, div)`` at the trained parameters to the new ensemble.  The
inner optimizer only sees that interface, which keeps the joint, split and
PIC-coupled steps on one code path.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .core import (JkoConfig, NonFiniteError, ParticleEnsemble, Variant,
                   eval_potential, eval_potential_gradient, first_nonfinite)
from .nn import (AdamState, FeatureMap, MlpArchitecture, MlpParams, adam_step,
                 forward_with_divergence, init_params, loss_gradient,
                 mean_loss)

# the network init stream must differ from the sampling stream of the same seed
_INIT_KEY_OFFSET = 0x9E3779B97F4A7C15


def init_key(seed: int) -> int:
    return (int(seed) + _INIT_KEY_OFFSET) % 2**64


@dataclass(frozen=True)
class StepProblem:
    x_in: np.ndarray
    v_in: np.ndarray
    closure: Callable
    commit: Callable
    constant: float = 0.0
    extra: dict = field(default_factory=dict)


@dataclass(frozen=True)
class StepResult:
    ensemble: ParticleEnsemble
    trained_params: MlpParams
    final_inner_loss: float
    inner_loss_trace: list
    control: np.ndarray = field(repr=False, default=None)
    divergence: np.ndarray = field(repr=False, default=None)
    extra: dict = field(default_factory=dict)


@dataclass
class DiagnosticsRecord:
    step: int
    time: float
    loss: float | None = None
    energy: float | None = None
    kl: float | None = None
    drift_error: float | None = None
    field_energy: float | None = None


# ---------------------------------------------------------------------------
# symplectic maps


def _xv(ens):
    if isinstance(ens, ParticleEnsemble):
        return ens.positions, ens.velocities, ens.domain
    x, v, dom = ens
    return np.atleast_2d(x), np.atleast_2d(v), dom


def symplectic_euler_map(ensemble, potential, dt):
    """``x* = x + vΔt``, ``v* = v - ∇φ(x*)Δt``.  Unit Jacobian."""
    x, v, dom = _xv(ensemble)
    xs = x + v * dt
    if dom is not None:
        xs = dom.wrap(xs)
    vs = v - eval_potential_gradient(potential, xs) * dt
    return xs, vs


def stormer_verlet_map(ensemble, potential, dt):
    """Half kick, drift, half kick.  Unit Jacobian."""
    x, v, dom = _xv(ensemble)
    vh = v - 0.5 * dt * eval_potential_gradient(potential, x)
    xs = x + dt * vh
    if dom is not None:
        xs = dom.wrap(xs)
    vs = vh - 0.5 * dt * eval_potential_gradient(potential, xs)
    return xs, vs


def hamiltonian_map(variant, ensemble, potential, dt):
    variant = Variant(variant)
    if variant == Variant.STORMER_VERLET:
        return stormer_verlet_map(ensemble, potential, dt)
    return symplectic_euler_map(ensemble, potential, dt)


# ---------------------------------------------------------------------------
# the joint and split objectives


def _check_finite(*arrays, what="update"):
    bad = first_nonfinite(*arrays)
    if bad is not None:
        raise NonFiniteError(f"non-finite {what} at particle {bad}", index=bad)


def jko_problem(ensemble: ParticleEnsemble, potential, dt, epsilon=1.0,
                variant=Variant.ALGORITHM_ONE, T0=1.0) -> StepProblem:
    """Joint step: kinetic cost plus ``ε·mean[½|v'|² + φ(x') + T0 log f']``."""
    variant = Variant(variant)
    x, v, lf = ensemble.positions, ensemble.velocities, ensemble.log_density
    dom = ensemble.domain
    n = ensemble.n_particles
    if variant == Variant.ALGORITHM_ONE:
        v_kick = v - eval_potential_gradient(potential, x) * dt
        xs = vs = None
    else:
        xs, vs = hamiltonian_map(variant, ensemble, potential, dt)
        phi_s = eval_potential(potential, xs)

    def update(u, div, sl):
        if variant == Variant.ALGORITHM_ONE:
            v1 = v_kick[sl] + u * dt
            x1 = dom.wrap(x[sl] + v1 * dt)
        else:
            v1 = vs[sl] + u * dt
            x1 = xs[sl]
        return x1, v1, lf[sl] - dt * div

    def closure(u, div, sl):
        x1, v1, lf1 = update(u, div, sl)
        phi1 = eval_potential(potential, x1) if variant == Variant.ALGORITHM_ONE else phi_s[sl]
        terms = 0.5 * dt * np.sum(u * u, axis=1) + epsilon * (
            0.5 * np.sum(v1 * v1, axis=1) + phi1 + T0 * lf1)
        g_u = dt * u + epsilon * dt * v1
        if variant == Variant.ALGORITHM_ONE:
            # x' = x + v'Δt, so φ(x') sees u through Δt²
            g_u += epsilon * dt * dt * eval_potential_gradient(potential, x1)
        return terms, g_u, np.full(u.shape[0], -epsilon * T0 * dt)

    def commit(u, div):
        x1, v1, lf1 = update(u, div, slice(None))
        _check_finite(x1, v1, lf1)
        return ensemble.replace(x1, v1, lf1)

    return StepProblem(x, v, closure, commit)


def split_problem(ensemble: ParticleEnsemble, potential, dt, epsilon=1.0,
                  variant=Variant.SYMPLECTIC_EULER, T0=1.0) -> StepProblem:
    """Split step: Hamiltonian map, then a velocity-only proximal step.

    The control is evaluated at ``(x*, vⁿ)`` and its divergence is taken in
    the ``vⁿ`` slot.  The objective has no potential term.
    """
    variant = Variant(variant)
    if variant == Variant.ALGORITHM_ONE:
        variant = Variant.SYMPLECTIC_EULER
    xs, vs = hamiltonian_map(variant, ensemble, potential, dt)
    v, lf = ensemble.velocities, ensemble.log_density
    n = ensemble.n_particles

    def closure(u, div, sl):
        v1 = vs[sl] + u * dt
        terms = 0.5 * dt * np.sum(u * u, axis=1) + epsilon * (
            0.5 * np.sum(v1 * v1, axis=1) + T0 * (lf[sl] - dt * div))
        return terms, dt * u + epsilon * dt * v1, np.full(u.shape[0], -epsilon * T0 * dt)

    def commit(u, div):
        v1 = vs + u * dt
        lf1 = lf - dt * div
        _check_finite(xs, v1, lf1)
        return ensemble.replace(xs, v1, lf1)

    return StepProblem(xs, v, closure, commit)


def jko_candidate_update(ensemble, potential, params, fm, dt, variant=Variant.ALGORITHM_ONE):
    """``(x^{n+1}, v^{n+1}, logdet)`` for the given control, without training."""
    u, div = forward_with_divergence(params, fm, ensemble.positions, ensemble.velocities)
    new = jko_problem(ensemble, potential, dt, 1.0, variant).commit(u, div)
    return new.positions, new.velocities, dt * div


def jko_loss(ensemble, potential, params, fm, dt, epsilon=1.0,
             variant=Variant.ALGORITHM_ONE, T0=1.0) -> float:
    prob = jko_problem(ensemble, potential, dt, epsilon, variant, T0)
    u, div = forward_with_divergence(params, fm, prob.x_in, prob.v_in)
    return mean_loss(prob.closure, u, div, prob.constant)


def jko_loss_and_gradient(ensemble, potential, params, fm, dt, epsilon=1.0,
                          variant=Variant.ALGORITHM_ONE, T0=1.0):
    prob = jko_problem(ensemble, potential, dt, epsilon, variant, T0)
    return loss_gradient(params, fm, prob.x_in, prob.v_in, prob.closure, prob.constant)


# ---------------------------------------------------------------------------
# inner optimization and steps


def inner_optimize(problem: StepProblem, params: MlpParams, fm: FeatureMap,
                   inner_iters: int, learning_rate: float):
    """``inner_iters`` Adam iterations from ``params`` (fresh optimizer state).

    Returns ``(params, trace)`` where ``trace[k]`` is the loss at iterate k.
    """
    if inner_iters < 1:
        raise ValueError("inner_iters must be at least 1")
    state = AdamState.zeros(params.flat.size, learning_rate)
    trace = []
    for k in range(inner_iters):
        try:
            loss, grad = loss_gradient(params, fm, problem.x_in, problem.v_in,
                                       problem.closure, problem.constant)
        except NonFiniteError as err:
            err.iteration = k
            raise
        trace.append(loss)
        params, state = adam_step(state, params, grad)
    return params, trace


def _solve(problem: StepProblem, params, fm, config: JkoConfig) -> StepResult:
    params, trace = inner_optimize(problem, params, fm, config.inner_iters, config.learning_rate)
    u, div = forward_with_divergence(params, fm, problem.x_in, problem.v_in)
    final = mean_loss(problem.closure, u, div, problem.constant)
    if not np.isfinite(final):
        raise NonFiniteError("non-finite loss at the trained parameters",
                             index=first_nonfinite(u, div), iteration=config.inner_iters)
    return StepResult(problem.commit(u, div), params, final, trace, u, div, dict(problem.extra))


def jko_step(ensemble, potential, params_prev, fm, config: JkoConfig) -> StepResult:
    prob = jko_problem(ensemble, potential, config.dt, config.epsilon,
                       config.symplectic_variant, config.T0)
    return _solve(prob, params_prev, fm, config)


def split_step(ensemble, potential, params_prev, fm, config: JkoConfig) -> StepResult:
    prob = split_problem(ensemble, potential, config.dt, config.epsilon,
                         config.symplectic_variant, config.T0)
    return _solve(prob, params_prev, fm, config)


# ---------------------------------------------------------------------------
# outer loop


@dataclass
class RunResult:
    records: list
    initial: DiagnosticsRecord
    ensemble: ParticleEnsemble
    params: MlpParams | None
    fm: FeatureMap | None
    snapshots: list = field(default_factory=list)   # (step, time, ensemble)
    histograms: list = field(default_factory=list)  # (step, time, H, edges_x, edges_v)


def network_for(params: dict, dim_x: int, dim_v: int):
    fm = FeatureMap(params.get("feature_omega"))
    arch = MlpArchitecture.build(fm.width(dim_x, dim_v), params["hidden"], dim_v,
                                 params["activation"], params["alpha"])
    return arch, fm


def config_from(params: dict, n_steps: int) -> JkoConfig:
    return JkoConfig(dt=float(params["dt"]), n_steps=n_steps, inner_iters=int(params["inner_iters"]),
                     learning_rate=float(params["learning_rate"]), warm_start=bool(params["warm_start"]),
                     seed=int(params["seed"]), symplectic_variant=params["symplectic_variant"],
                     epsilon=float(params["epsilon"]), T0=float(params["T0"]))


def march(ensemble, potential, config: JkoConfig, arch, fm, *, step_fn=jko_step,
          diagnose=None, snapshot_every=0, init_scheme="uniform", progress=None) -> RunResult:
    """Run ``config.n_steps`` steps; ``diagnose(step, t, before, result)`` fills a record."""
    from .oracles import discrete_energy  # local: oracles do not depend on the scheme

    theta0 = init_params(arch, init_key(config.seed), init_scheme)
    params = theta0
    init = DiagnosticsRecord(0, 0.0, None, discrete_energy(ensemble, potential, config.T0))
    if diagnose is not None:
        diagnose(0, 0.0, ensemble, None, init)
    records, snaps = [], []
    if snapshot_every:
        snaps.append((0, 0.0, ensemble))
    for n in range(config.n_steps):
        start = params if (config.warm_start or n == 0) else theta0
        res = step_fn(ensemble, potential, start, fm, config)
        t = (n + 1) * config.dt
        rec = DiagnosticsRecord(n + 1, t, res.final_inner_loss,
                                discrete_energy(res.ensemble, potential, config.T0))
        if diagnose is not None:
            diagnose(n + 1, t, ensemble, res, rec)
        records.append(rec)
        ensemble, params = res.ensemble, res.trained_params
        if snapshot_every and (n + 1) % snapshot_every == 0:
            snaps.append((n + 1, t, ensemble))
        if progress is not None:
            progress(rec)
    return RunResult(records, init, ensemble, params, fm, snaps)


def run_linear(preset, params: dict | None = None, *, oracle=None, split=False,
               ensemble=None, progress=None) -> RunResult:
    """Algorithm-1 march on a closed-form potential with registered diagnostics.

    ``params`` is a resolved parameter dict (preset defaults plus overrides);
    ``oracle`` defaults to the registry entry for the preset.
    """
    from .oracles import oracle_for
    from .presets import load_preset, sample_initial_ensemble

    preset = load_preset(preset)
    params = preset.with_overrides(None) if params is None else params
    n_steps = preset.n_steps(params)
    config = config_from(params, n_steps)
    if ensemble is None:
        ensemble = sample_initial_ensemble(preset, int(params["n_particles"]), config.seed,
                                           velocity_sampling=params["velocity_sampling"],
                                           n_cells=int(params["n_cells"]), T0=config.T0)
    arch, fm = network_for(params, preset.domain.dim_x, preset.domain.dim_v)
    oracle = oracle_for(preset, config.epsilon, config.T0) if oracle is None else oracle
    return march(ensemble, preset.potential, config, arch, fm,
                 step_fn=split_step if split else jko_step,
                 diagnose=oracle.diagnose if oracle is not None else None,
                 snapshot_every=int(params["snapshot_every"]),
                 init_scheme=params["init_scheme"], progress=progress)
