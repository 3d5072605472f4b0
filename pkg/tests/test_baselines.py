import numpy as np
import pytest

from kinetic_jko.baselines import (implicit_score_loss, run_score_baseline, score_transport_step,
                                   train_score, velocity_matching_objective)
from kinetic_jko.core import DomainSpec, ParticleEnsemble, QuadraticForm
from kinetic_jko.nn import FeatureMap, MlpArchitecture, MlpParams, init_params, mlp_forward
from kinetic_jko.oracles import GaussianOracle
from kinetic_jko.presets import load_preset, sample_initial_ensemble
from kinetic_jko.scheme import symplectic_euler_map

ID = FeatureMap()
AFF = MlpArchitecture((2, 1), "none")


def _ens(x, v, lf=None):
    x, v = np.asarray(x, float).reshape(len(x), -1), np.asarray(v, float).reshape(len(v), -1)
    lf = np.zeros(len(x)) if lf is None else lf
    return ParticleEnsemble(x, v, lf, DomainSpec(x.shape[1], v.shape[1]))


def test_implicit_score_loss_affine(rng):
    e = _ens(rng.normal(size=500), rng.normal(size=500))
    v = e.velocities[:, 0]
    for a, b in [(0.0, 0.0), (-1.0, 0.0), (0.3, -0.7)]:
        expect = a * a * np.mean(v * v) + b * b + 2 * a * b * np.mean(v) + 2 * a
        assert implicit_score_loss(MlpParams(AFF, [0.0, a, b]), ID, e) == pytest.approx(expect, rel=1e-12)
    # population minimiser over affine fields on the empirical moments
    m1, m2 = np.mean(v), np.mean(v * v)
    a, b = np.linalg.solve([[m2, m1], [m1, 1.0]], [-1.0, 0.0])
    best = implicit_score_loss(MlpParams(AFF, [0.0, a, b]), ID, e)
    for _ in range(20):
        da, db = 0.05 * rng.normal(size=2)
        assert implicit_score_loss(MlpParams(AFF, [0.0, a + da, b + db]), ID, e) >= best
    assert abs(a + 1) < 0.2 and abs(b) < 0.2


def test_implicit_minus_explicit_is_constant():
    rng = np.random.default_rng(3)
    n = 100_000
    e = _ens(rng.normal(size=n), rng.normal(size=n))
    arch = MlpArchitecture((2, 8, 1))
    gaps = []
    for s in range(10):
        p = init_params(arch, s)
        p = p.with_flat(0.3 * p.flat)
        sv = mlp_forward(p, ID, e.positions, e.velocities)
        explicit = np.mean(np.sum((sv + e.velocities) ** 2, axis=1))
        gaps.append(implicit_score_loss(p, ID, e) - explicit)
    gaps = np.array(gaps)
    assert np.ptp(gaps) < 1e-3 * np.abs(gaps).mean()


def test_trained_score_matches_gaussian():
    rng = np.random.default_rng(0)
    e = _ens(rng.normal(size=10_000), rng.normal(size=10_000))
    p, trace = train_score(e, init_params(MlpArchitecture((2, 16, 16, 1)), 1), ID, 400, 1e-2)
    assert trace[-1] < trace[0]
    w = np.linspace(-2, 2, 81)[:, None]
    s = mlp_forward(p, ID, np.zeros_like(w), w)
    assert np.mean((s + w) ** 2) < 0.05


def test_zero_score_zero_loss(rng):
    e = _ens(rng.normal(size=50), rng.normal(size=50))
    assert implicit_score_loss(MlpParams(AFF, [0.0, 0.0, 0.0]), ID, e) == 0.0


def test_transport_equilibrium_and_zero_epsilon(rng):
    pot = QuadraticForm(np.diag([2.0, 1.0]), np.zeros(2))
    e = _ens(rng.normal(size=40), rng.normal(size=40), rng.normal(size=40))
    exact = MlpParams(AFF, [0.0, -1.0, 0.0])       # s = -v
    new, w = score_transport_step(e, pot, exact, ID, 0.1, 1.0)
    assert np.abs(w).max() == 0.0
    # with zero dissipation the step is the kick-drift map
    other = init_params(MlpArchitecture((2, 8, 1)), 2)
    new, w = score_transport_step(e, pot, other, ID, 0.1, 0.0)
    v1 = e.velocities - 0.1 * 2 * e.positions
    assert np.allclose(new.velocities, v1) and np.allclose(new.positions, e.positions + 0.1 * v1)
    assert np.allclose(new.log_density, e.log_density)


def test_exact_score_transport_tracks_moments():
    preset = load_preset("example1_1d")
    oracle = GaussianOracle(preset)
    ref = GaussianOracle(preset)
    ens = sample_initial_ensemble(preset, 20_000, 4)
    dt = 0.01
    for n in range(100):
        m = oracle.moments(n * dt)
        P = np.linalg.inv(m.C)
        # velocity block of -C^{-1}(z - mu) as an affine field
        p = MlpParams(AFF, [-P[1, 0], -P[1, 1], P[1] @ m.mu])
        ens, _ = score_transport_step(ens, preset.potential, p, ID, dt, 1.0)
    z = np.hstack([ens.positions, ens.velocities])
    C = ref.moments(1.0).C
    # Monte Carlo noise (~5 stderr) plus O(dt) bias
    assert np.abs(np.cov(z.T) - C).max() < 5 * 3 / np.sqrt(20_000) + 0.05


def test_score_baseline_run_schema():
    preset = load_preset("example1_1d")
    params = preset.with_overrides({"n_particles": 200, "t_final": 0.3, "inner_iters": 3,
                                    "hidden": [8], "activation": "tanh"})
    res = run_score_baseline(preset, params)
    assert len(res.records) == 3
    assert all(r.drift_error is not None and r.kl is not None for r in res.records)


# velocity matching


VM = MlpArchitecture((2, 2), "none")


def test_velocity_matching_zero(rng):
    e = _ens(rng.normal(size=30), rng.normal(size=30))
    pot = QuadraticForm(np.diag([2.0, 1.0]), np.zeros(2))
    assert velocity_matching_objective(MlpParams(VM, np.zeros(6)), ID, e, pot) == 0.0


def test_velocity_matching_affine_optimum(rng):
    a = 2.0
    pot = QuadraticForm(np.diag([a, 1.0]), np.zeros(2))       # grad phi = a x
    e = _ens(rng.normal(size=400), rng.normal(size=400))
    x, v = e.positions[:, 0], e.velocities[:, 0]
    # u^x = v, u^v = v - a x; divergence terms are the constants 2*1 + 2a + 2*1
    opt = np.array([0.0, 1.0, -a, 1.0, 0.0, 0.0])
    div = 2 + 2 * a + 2
    quad = velocity_matching_objective(MlpParams(VM, opt), ID, e, pot) - div
    assert quad == pytest.approx(-np.mean(v * v) - np.mean((v - a * x) ** 2), rel=1e-12)
    # brute force: any other affine field with the same divergence constants is worse
    for _ in range(30):
        d = 0.2 * rng.normal(size=6)
        d[[1, 2, 3]] = 0.0
        trial = velocity_matching_objective(MlpParams(VM, opt + d), ID, e, pot) - div
        assert trial >= quad - 1e-12


def test_velocity_matching_homogeneity(rng):
    e = _ens(rng.normal(size=60), rng.normal(size=60))
    pot = QuadraticForm(np.diag([1.0, 1.0]), np.zeros(2))
    p = init_params(MlpArchitecture((2, 8, 2)), 6)
    # doubling the output layer doubles u
    W = p.flat.copy()
    k = 2 * 8 + 8
    W[k:] *= 2
    # split into quadratic (degree 2) and linear (degree 1) parts from three scalings
    f1 = velocity_matching_objective(p, ID, e, pot)
    f2 = velocity_matching_objective(p.with_flat(W), ID, e, pot)
    W3 = p.flat.copy()
    W3[k:] *= 3
    f3 = velocity_matching_objective(p.with_flat(W3), ID, e, pot)
    # f(c) = c^2 Q + c L  =>  f(2) = 4Q + 2L, f(3) = 9Q + 3L
    Q = (f2 - 2 * f1) / 2
    L = f1 - Q
    assert f3 == pytest.approx(9 * Q + 3 * L, rel=1e-10)


def test_velocity_matching_needs_two_blocks(rng):
    e = _ens(rng.normal(size=5), rng.normal(size=5))
    with pytest.raises(ValueError):
        velocity_matching_objective(init_params(MlpArchitecture((2, 1)), 0), ID, e,
                                    QuadraticForm(np.eye(2), np.zeros(2)))
