import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mfstab.dynamics import (IntegratorConfig, PhaseState, evolve_pair, force_all, integrate,
                             step, total_energy, write_trajectory_csv)
from mfstab.gibbs import ChainConfig, GibbsParams, sample_gibbs
from mfstab.metrics import norm1
from mfstab.potential import PotentialSpec, SingularityError, potential_value
from oracles import epot_reference, free_flight, phi_reference


def random_state(n, seed, vscale=1.0):
    rng = np.random.default_rng(seed)
    return PhaseState(rng.random((n, 3)), vscale * rng.standard_normal((n, 3)))


def torus_err(a, b):
    d = a - b
    return np.abs(d - np.round(d))


@pytest.fixture(scope="module")
def gibbs_state32(spec15):
    z, _ = sample_gibbs(GibbsParams(1.0, 32, spec15), ChainConfig(burn_in_sweeps=1000),
                        np.random.default_rng(11))
    return z


# --- state and config ----------------------------------------------------------


def test_state_wraps_positions():
    z = PhaseState([[1.25, -0.25, 3.0]], [[0.0, 0.0, 0.0]])
    np.testing.assert_allclose(z.positions, [[0.25, 0.75, 0.0]])


@pytest.mark.parametrize("x,v", [(np.zeros((2, 2)), np.zeros((2, 2))),
                                 (np.zeros((2, 3)), np.zeros((3, 3))),
                                 (np.zeros((0, 3)), np.zeros((0, 3)))])
def test_state_rejects_bad_shapes(x, v):
    with pytest.raises(ValueError):
        PhaseState(x, v)


@pytest.mark.parametrize("kw", [dict(dt=0.0), dict(t_end=-1.0), dict(dt=0.3, t_end=1.0),
                                dict(t_end=1.0, dt=1e-3, n_observations=7)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        IntegratorConfig(**kw)


def test_observation_grid():
    cfg = IntegratorConfig(dt=1e-3, t_end=2.0, n_observations=20)
    assert cfg.steps == 2000 and cfg.stride == 100
    np.testing.assert_allclose(cfg.times, np.linspace(0, 2, 21))


# --- energy -------------------------------------------------------------------------


def test_kinetic_energy_example(spec15):
    z = PhaseState([[0.1, 0.1, 0.1], [0.6, 0.1, 0.1]], [[1, 0, 0], [1, 0, 0]])
    assert total_energy(z, spec15).kinetic == 1.0


def test_potential_energy_raw_pair():
    spec = PotentialSpec(1.5, image_shells=0, taper_radius=None)
    z = PhaseState([[0.0, 0.0, 0.0], [0.5, 0.0, 0.0]], np.zeros((2, 3)))
    assert total_energy(z, spec).potential == pytest.approx(math.sqrt(2) / 2, rel=1e-14)


def test_free_case_has_no_potential(free_spec):
    z = random_state(10, 0)
    rep = total_energy(z, free_spec)
    assert rep.potential == 0.0
    assert rep.total == rep.kinetic


@pytest.mark.parametrize("alpha", [0.5, 1.5])
def test_potential_energy_matches_double_loop(alpha):
    spec = PotentialSpec.build(alpha)
    z = random_state(12, 1)
    ref = epot_reference(z.positions, lambda d: phi_reference(d, alpha, shift=spec.mean_shift))
    assert total_energy(z, spec).potential == pytest.approx(ref, rel=1e-12, abs=1e-13)


def test_untapered_potential_energy_matches_double_loop():
    spec = PotentialSpec.build(1.5, taper_radius=None, image_shells=1)
    z = random_state(6, 2)
    ref = epot_reference(z.positions, lambda d: phi_reference(d, 1.5, taper_radius=None, shells=1,
                                                              shift=spec.mean_shift))
    assert total_energy(z, spec).potential == pytest.approx(ref, rel=1e-12)


def test_coincident_particles_raise(spec15, spec05):
    z = PhaseState([[0.2, 0.2, 0.2], [0.2, 0.2, 0.2], [0.5, 0.5, 0.5]], np.zeros((3, 3)))
    with pytest.raises(SingularityError):
        total_energy(z, spec15)
    with pytest.raises(SingularityError):
        force_all(z, spec15)
    # bounded potential: coincidence is harmless for the energy
    assert math.isfinite(total_energy(z, spec05).potential)


# --- forces --------------------------------------------------------------------------


def test_two_body_action_reaction(spec15):
    z = random_state(2, 3)
    f = force_all(z, spec15)
    assert np.array_equal(f[0], -f[1])


def test_free_case_forces_vanish(free_spec):
    assert np.array_equal(force_all(random_state(9, 4), free_spec), np.zeros((9, 3)))


@pytest.mark.parametrize("alpha", [0.5, 1.0, 1.5])
@pytest.mark.parametrize("seed", range(5))
def test_force_is_minus_energy_gradient(alpha, seed):
    spec = PotentialSpec.build(alpha)
    z = random_state(8, 100 + seed)
    f = force_all(z, spec)
    h = 1e-6
    fd = np.zeros_like(f)
    for i in range(8):
        for k in range(3):
            xp, xm = z.positions.copy(), z.positions.copy()
            xp[i, k] += h
            xm[i, k] -= h
            ep = total_energy(PhaseState(xp, z.velocities), spec).potential
            em = total_energy(PhaseState(xm, z.velocities), spec).potential
            fd[i, k] = -(ep - em) / (2 * h)
    assert np.max(np.abs(f - fd)) / np.max(np.abs(f)) < 1e-5


@given(st.integers(2, 40), st.integers(0, 2**32 - 1))
def test_total_force_vanishes(n, seed):
    spec = PotentialSpec(1.5, mean_shift=0.3)
    f = force_all(random_state(n, seed), spec)
    scale = max(np.max(np.abs(f)), 1.0)
    assert np.max(np.abs(f.sum(axis=0))) < 1e-12 * n * scale


def test_cell_list_matches_all_pairs():
    spec = PotentialSpec.build(1.5, taper_radius=0.2, cutoff=0.25)
    z = random_state(200, 5)
    a = force_all(z, spec)
    b = force_all(z, spec, cell_list=True)
    assert np.max(np.abs(a - b)) < 1e-12
    cfg = IntegratorConfig(dt=1e-3, t_end=0.05, n_observations=5)
    ta = integrate(z, spec, cfg)
    tb = integrate(z, spec, IntegratorConfig(dt=1e-3, t_end=0.05, n_observations=5, cell_list=True))
    np.testing.assert_allclose(ta.energy, tb.energy, rtol=1e-12)
    assert np.max(torus_err(ta.positions, tb.positions)) < 1e-10


# --- stepping ---------------------------------------------------------------------------


def test_free_flight(free_spec):
    z = random_state(7, 6)
    cur = z
    for _ in range(25):
        cur = step(cur, free_spec, 1e-3)
    assert np.array_equal(cur.velocities, z.velocities)
    assert np.max(torus_err(cur.positions, free_flight(z.positions, z.velocities, 25e-3))) < 1e-13


def test_step_rejects_bad_dt(spec15):
    with pytest.raises(ValueError):
        step(random_state(3, 0), spec15, 0.0)


def test_step_matches_integrate(spec15):
    z = random_state(6, 7)
    cur = z
    for _ in range(10):
        cur = step(cur, spec15, 1e-3)
    tr = integrate(z, spec15, IntegratorConfig(dt=1e-3, t_end=1e-2, n_observations=1))
    np.testing.assert_allclose(cur.positions, tr.positions[-1], atol=1e-14)
    np.testing.assert_allclose(cur.velocities, tr.velocities[-1], atol=1e-13)


def test_reversibility(spec10):
    z = random_state(16, 8)
    cfg = IntegratorConfig(dt=1e-3, t_end=0.5, n_observations=1)
    fwd = integrate(z, spec10, cfg)
    mid = fwd.state(1)
    back = integrate(PhaseState(mid.positions, -mid.velocities), spec10, cfg)
    assert np.max(torus_err(back.positions[-1], z.positions)) < 1e-6
    np.testing.assert_allclose(-back.velocities[-1], z.velocities, atol=1e-6)


def test_energy_conservation_gibbs_start(spec15, gibbs_state32):
    tr = integrate(gibbs_state32, spec15, IntegratorConfig(dt=1e-3, t_end=1.0))
    assert not tr.hit_floor
    assert tr.relative_drift < 1e-4


def test_momentum_conservation(spec15, gibbs_state32):
    tr = integrate(gibbs_state32, spec15, IntegratorConfig(dt=1e-3, t_end=1.0))
    p = tr.velocities.sum(axis=1)
    assert np.max(np.abs(p - p[0])) < 1e-10


def test_drift_scales_quadratically(spec05):
    z = random_state(16, 9)
    d1 = integrate(z, spec05, IntegratorConfig(dt=1e-2, t_end=1.0)).relative_drift
    d2 = integrate(z, spec05, IntegratorConfig(dt=5e-3, t_end=1.0)).relative_drift
    assert 3.5 <= d1 / d2 <= 4.5


def test_deterministic(spec15):
    z = random_state(20, 10)
    cfg = IntegratorConfig(dt=1e-3, t_end=0.2)
    a, b = integrate(z, spec15, cfg), integrate(z, spec15, cfg)
    assert np.array_equal(a.positions, b.positions)
    assert np.array_equal(a.energy, b.energy)


def test_flow_preserves_mean_energy(spec15):
    params = GibbsParams(1.0, 16, spec15)
    chain = ChainConfig(burn_in_sweeps=200)
    h0, h1 = [], []
    for k in range(30):
        z, _ = sample_gibbs(params, chain, np.random.default_rng(1000 + k))
        tr = integrate(z, spec15, IntegratorConfig(dt=1e-3, t_end=1.0, n_observations=1))
        h0.append(tr.energy[0])
        h1.append(tr.energy[-1])
    diff = np.mean(h1) - np.mean(h0)
    se = np.std(np.array(h1) - np.array(h0), ddof=1) / math.sqrt(30) + 1e-15
    assert abs(diff) <= 3 * se + 1e-6 * abs(np.mean(h0))


# --- paired evolution ----------------------------------------------------------------


def test_pair_identical_states_zero_distance(spec15):
    z = random_state(16, 12)
    res = evolve_pair(z, z.copy(), spec15, IntegratorConfig(dt=1e-3, t_end=0.2),
                      {"d": lambda t, a, b: norm1(a, b)})
    assert not res.rejected
    assert np.array_equal(res.records["d"], np.zeros(21))


def test_pair_free_flight_distance(free_spec):
    rng = np.random.default_rng(13)
    z = random_state(10, 13)
    dv = 1e-3 * rng.standard_normal((10, 3))
    zs = PhaseState(z.positions, z.velocities + dv)
    obs = {"x": lambda t, a, b: float(np.sum(np.linalg.norm(torus_err(a.positions, b.positions), axis=1))) / 20,
           "v": lambda t, a, b: float(np.sum(np.linalg.norm(a.velocities - b.velocities, axis=1))) / 20}
    res = evolve_pair(z, zs, free_spec, IntegratorConfig(dt=1e-3, t_end=1.0), obs)
    expect = np.sum(np.linalg.norm(dv, axis=1)) / 20
    np.testing.assert_allclose(res.records["x"], res.times * expect, rtol=1e-8, atol=1e-14)
    np.testing.assert_allclose(res.records["v"], expect, rtol=1e-12)


def test_pair_step_halving_oracle(spec15):
    params = GibbsParams(1.0, 16, spec15)
    z, _ = sample_gibbs(params, ChainConfig(burn_in_sweeps=500), np.random.default_rng(14))
    dv = np.random.default_rng(15).standard_normal((16, 3)) / 4.0
    zs = PhaseState(z.positions, z.velocities + dv)
    obs = {"d": lambda t, a, b: norm1(a, b)}
    a = evolve_pair(z, zs, spec15, IntegratorConfig(dt=1e-3, t_end=1.0), obs)
    b = evolve_pair(z, zs, spec15, IntegratorConfig(dt=5e-4, t_end=1.0), obs)
    rel = np.abs(a.records["d"] - b.records["d"]) / b.records["d"]
    assert np.max(rel) < 0.01


def test_pair_rejects_close_encounter(spec15):
    x = np.array([[0.3, 0.5, 0.5], [0.7, 0.5, 0.5]])
    v = np.array([[40.0, 0.0, 0.0], [-40.0, 0.0, 0.0]])
    z = PhaseState(x, v)
    res = evolve_pair(z, z.copy(), spec15,
                      IntegratorConfig(dt=1e-4, t_end=0.01, n_observations=1,
                                       min_pair_distance_floor=1e-2))
    assert res.rejected and res.reason == "distance_floor"


def test_pair_rejects_energy_drift(spec15):
    z = random_state(16, 16, vscale=3.0)
    cfg = IntegratorConfig(dt=0.02, t_end=0.2, n_observations=1, energy_drift_tolerance=1e-14,
                           max_halvings=1, min_pair_distance_floor=1e-9)
    res = evolve_pair(z, z.copy(), spec15, cfg)
    assert res.rejected and res.reason == "energy_drift"
    assert res.dt == pytest.approx(0.01)


def test_pair_halving_recovers(spec15):
    z = random_state(16, 17)
    base = integrate(z, spec15, IntegratorConfig(dt=4e-3, t_end=0.4, n_observations=4))
    tol = 0.5 * base.relative_drift
    res = evolve_pair(z, z.copy(), spec15,
                      IntegratorConfig(dt=4e-3, t_end=0.4, n_observations=4,
                                       energy_drift_tolerance=tol))
    assert not res.rejected
    assert res.dt < 4e-3


def test_pair_mismatched_sizes(spec15):
    with pytest.raises(ValueError):
        evolve_pair(random_state(3, 0), random_state(4, 0), spec15, IntegratorConfig())


def test_trajectory_csv(tmp_path, spec15):
    tr = integrate(random_state(3, 18), spec15, IntegratorConfig(dt=1e-3, t_end=0.01, n_observations=2))
    p = tmp_path / "traj.csv"
    write_trajectory_csv(p, tr, "# digest=abc\n")
    lines = p.read_text().splitlines()
    assert lines[0] == "# digest=abc"
    assert lines[1] == "t,i,x,y,z,vx,vy,vz"
    assert len(lines) == 2 + 3 * 3
    row = [float(v) for v in lines[-1].split(",")]
    assert row[1] == 2
    np.testing.assert_array_equal(row[2:5], tr.positions[-1, 2])
