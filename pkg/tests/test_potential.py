import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from mfstab.gibbs import cube_integral
from mfstab.potential import (PotentialSpec, SingularityError, certify_derivative_bounds,
                              estimate_phi_min, force, potential_value, radial_profile,
                              torus_displacement, torus_distance, wrap_positions)
from oracles import fd_gradient, min_image_bruteforce, phi_reference

unit = st.floats(0.0, 1.0, allow_nan=False, exclude_max=True)
points = arrays(np.float64, 3, elements=unit)


# --- torus geometry -------------------------------------------------------


def test_displacement_wraps():
    d = torus_displacement([0.9, 0, 0], [0.1, 0, 0])
    np.testing.assert_allclose(d, [-0.2, 0, 0], atol=1e-15)


def test_displacement_identity():
    a = np.array([0.3, 0.7, 0.1])
    assert np.array_equal(torus_displacement(a, a), np.zeros(3))


def test_displacement_matches_27_images_bulk():
    rng = np.random.default_rng(0)
    a, b = rng.random((10_000, 3)), rng.random((10_000, 3))
    d = torus_displacement(a, b)
    ref = min_image_bruteforce(a, b)
    np.testing.assert_allclose(np.linalg.norm(d, axis=1), np.linalg.norm(ref, axis=1), atol=1e-14)
    assert np.all(np.abs(d) <= 0.5)


@given(points, points)
def test_displacement_is_minimal_image(a, b):
    d = torus_displacement(a, b)
    assert np.all(np.abs(d) <= 0.5)
    assert np.linalg.norm(d) <= np.linalg.norm(min_image_bruteforce(a, b)) + 1e-12
    # representative of a - b modulo the lattice
    k = (np.asarray(a) - b) - d
    np.testing.assert_allclose(k, np.round(k), atol=1e-12)


@given(arrays(np.float64, (5, 3), elements=st.floats(-50, 50)))
def test_wrap_positions_in_unit_cell(x):
    y = wrap_positions(x)
    assert np.all((y >= 0.0) & (y < 1.0))


def test_torus_distance_symmetric():
    rng = np.random.default_rng(1)
    a, b = rng.random((100, 3)), rng.random((100, 3))
    np.testing.assert_array_equal(torus_distance(a, b), torus_distance(b, a))


# --- construction ----------------------------------------------------------


@pytest.mark.parametrize("alpha", [0.0, 2.0, 2.5, -1.0])
def test_rejects_alpha_outside_range(alpha):
    with pytest.raises(ValueError, match="alpha < 2"):
        PotentialSpec(alpha)


@pytest.mark.parametrize("kw", [dict(amplitude=-1.0), dict(cutoff=0.6), dict(image_shells=-1),
                                dict(taper_radius=1.0, cutoff=0.5)])
def test_rejects_bad_parameters(kw):
    with pytest.raises(ValueError):
        PotentialSpec(1.5, **kw)


def test_spec_is_frozen(spec15):
    with pytest.raises(Exception):
        spec15.alpha = 1.0


# --- values -------------------------------------------------------------------


def test_pure_power_value():
    spec = PotentialSpec(1.5, image_shells=0, taper_radius=None)
    assert potential_value(spec, [0.25, 0.0, 0.0]) == pytest.approx(2.0, rel=1e-15)


@pytest.mark.parametrize("alpha", [0.5, 1.0, 1.5, 1.9])
def test_values_match_reference_tapered(alpha):
    spec = PotentialSpec.build(alpha)
    rng = np.random.default_rng(2)
    x = rng.random((500, 3)) - 0.5
    ref = phi_reference(x, alpha, shift=spec.mean_shift)
    np.testing.assert_allclose(potential_value(spec, x), ref, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("shells", [0, 1, 2])
def test_values_match_image_sum(shells):
    spec = PotentialSpec(1.5, image_shells=shells, taper_radius=None)
    rng = np.random.default_rng(3)
    x = rng.random((200, 3)) - 0.5
    ref = phi_reference(x, 1.5, taper_radius=None, shells=shells)
    np.testing.assert_allclose(potential_value(spec, x), ref, rtol=1e-12)


def test_bounded_case_has_finite_origin_limit(spec05):
    r = np.geomspace(1e-12, 1e-3, 20)
    vals = radial_profile(spec05, r)
    assert np.all(np.isfinite(vals))
    assert np.max(np.abs(vals + spec05.mean_shift)) < 0.04
    # alpha < 1: evaluating at the origin itself is allowed
    assert np.isfinite(potential_value(spec05, [0.0, 0.0, 0.0]))


def test_singular_at_origin(spec15):
    with pytest.raises(SingularityError):
        potential_value(spec15, [0.0, 0.0, 0.0])
    with pytest.raises(SingularityError):
        force(spec15, [1.0, 0.0, 0.0])  # an image of the origin
    assert radial_profile(spec15, 1e-8)[0] > 1e3


@given(arrays(np.float64, 3, elements=st.floats(-0.5, 0.5)))
def test_even_and_odd(x):
    spec = PotentialSpec(1.5, mean_shift=0.4)
    if np.linalg.norm(x) < 1e-9:
        return
    assert float(potential_value(spec, x)) == float(potential_value(spec, -x))
    np.testing.assert_array_equal(force(spec, -x), -force(spec, x))


def test_periodic(spec15):
    rng = np.random.default_rng(4)
    x = rng.random((50, 3)) - 0.5
    k = rng.integers(-3, 4, size=(50, 3))
    np.testing.assert_allclose(potential_value(spec15, x + k), potential_value(spec15, x),
                               rtol=1e-12)


# --- force ------------------------------------------------------------------------


def test_force_matches_fd_untapered():
    spec = PotentialSpec(1.5, image_shells=0, taper_radius=None)
    x = np.array([0.3, 0.0, 0.0])
    fd = -fd_gradient(lambda y: potential_value(spec, y), x, h=1e-5)
    np.testing.assert_allclose(force(spec, x), fd, rtol=1e-6, atol=1e-9)


@pytest.mark.parametrize("alpha", [0.5, 1.0, 1.5, 1.9])
def test_force_matches_fd_random(alpha):
    spec = PotentialSpec.build(alpha)
    rng = np.random.default_rng(5)
    x = rng.random((300, 3)) - 0.5
    r = np.linalg.norm(x, axis=1)
    x = x[(r > 0.05) & (r < 0.49)]
    fd = -fd_gradient(lambda y: phi_reference(y, alpha, shift=spec.mean_shift), x, h=1e-6)
    f = force(spec, x)
    err = np.linalg.norm(f - fd, axis=1) / np.maximum(np.linalg.norm(f, axis=1), 1e-3)
    seam = np.abs(np.linalg.norm(x, axis=1) - spec.taper_onset) < 1e-3
    assert np.all(err[~seam] < 1e-5)
    assert np.all(err[seam] < 1e-3)


def _axis(r):
    x = np.zeros((len(r), 3))
    x[:, 0] = r
    return x


def test_repulsive_below_onset(spec15):
    r = np.linspace(0.01, spec15.taper_onset - 1e-3, 30)
    assert np.all(force(spec15, _axis(r))[:, 0] > 0)


def test_bounded_case_core_pulls_inward(spec05):
    # r^(1 - alpha) increases with r when alpha < 1
    r = np.linspace(0.01, spec05.taper_onset - 1e-3, 30)
    assert np.all(force(spec05, _axis(r))[:, 0] < 0)


def test_alpha_one_force_only_from_taper(spec10):
    x = np.zeros((3, 3))
    x[:, 0] = [0.05, 0.2, 0.24]
    np.testing.assert_array_equal(force(spec10, x), 0.0)
    x[:, 0] = [0.3, 0.4, 0.45]
    assert np.all(force(spec10, x)[:, 0] > 0)


def test_taper_is_c2_at_cutoff(spec15):
    h = 1e-4
    r = np.array([0.5 - 2 * h, 0.5 - h, 0.5])
    vals = radial_profile(spec15, r) + spec15.mean_shift
    assert vals[-1] == 0.0
    # value, slope and curvature all vanish: phi ~ (r_c - r)^3
    assert vals[0] / vals[1] == pytest.approx(8.0, rel=1e-2)


# --- calibration ---------------------------------------------------------------


def test_zero_mean_by_quadrature(spec15):
    avg = cube_integral(lambda y: potential_value(spec15, y), 48)
    assert abs(avg) < 1e-6


def test_zero_mean_midpoint_grid(spec15):
    # the 64^3 midpoint rule has an O(h^2.5) bias at this singularity;
    # Richardson extrapolation with 128^3 removes it
    def grid_avg(m):
        g = (np.arange(m) + 0.5) / m - 0.5
        total = 0.0
        for gx in g:
            yy, zz = np.meshgrid(g, g, indexing="ij")
            pts = np.stack([np.full(yy.size, gx), yy.ravel(), zz.ravel()], axis=1)
            total += float(np.sum(potential_value(spec15, pts)))
        return total / m**3

    a64, a128 = grid_avg(64), grid_avg(128)
    assert abs(a64) < 1e-5
    extrap = (2**2.5 * a128 - a64) / (2**2.5 - 1)
    assert abs(extrap) < 1e-6


@pytest.mark.parametrize("alpha", [0.5, 1.5])
def test_zero_mean_untapered(alpha):
    spec = PotentialSpec.build(alpha, taper_radius=None, image_shells=1)
    avg = cube_integral(lambda y: potential_value(spec, y), 48)
    assert abs(avg) < 1e-6


def test_phi_min_free_case(free_spec):
    assert free_spec.phi_min == 0.0


def test_phi_min_corner_for_pure_power():
    spec = PotentialSpec(1.5, image_shells=0, taper_radius=None)
    pm = estimate_phi_min(spec)
    corner = float(potential_value(spec, [0.5, 0.5, 0.5]))
    assert pm <= corner
    assert pm == pytest.approx(corner, abs=5e-3)


@pytest.mark.parametrize("alpha", [0.5, 1.0, 1.5, 1.9])
def test_phi_min_is_lower_bound(alpha):
    spec = PotentialSpec.build(alpha)
    assert spec.phi_min < 0.0
    rng = np.random.default_rng(6)
    x = rng.random((200_000, 3)) - 0.5
    assert np.min(potential_value(spec, x)) >= spec.phi_min
    # tapered with cutoff 1/2: the minimum is the plateau value -mean_shift
    assert spec.phi_min == pytest.approx(-spec.mean_shift, abs=1e-2)


# --- derivative bounds ------------------------------------------------------------


def test_bounds_free_case(free_spec):
    rep = certify_derivative_bounds(free_spec)
    assert rep["constants"] == {"C0": 0.0, "C1": 0.0, "C2": 0.0}
    assert rep["finite"]


def test_bounds_pure_power_law():
    spec = PotentialSpec(1.5, image_shells=0, taper_radius=None)
    # r_max below 1/2: the untruncated minimal-image sum has a kink there
    c = certify_derivative_bounds(spec, r_max=0.45)["constants"]
    # r^(1-a): C0 = 1, |grad| = (a-1) r^-a, |hess| = (a-1) a r^-(a+1)
    assert c["C0"] == pytest.approx(1.0, rel=1e-12)
    assert c["C1"] == pytest.approx(0.5, rel=1e-10)
    assert c["C2"] == pytest.approx(0.75, rel=1e-6)


def test_bounds_with_mean_shift(spec15):
    c = certify_derivative_bounds(spec15)["constants"]
    assert 0.0 < c["C0"] <= 1.0 + 1e-12


def test_bounds_near_critical_alpha():
    rep = certify_derivative_bounds(PotentialSpec.build(1.9))
    assert rep["finite"]
    assert all(v > 0 for v in rep["constants"].values())
