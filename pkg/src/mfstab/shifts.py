"""Velocity-only shift distributions and their image-measure checks.

Three families of shifts delta = (0, delta_v) of an initial condition:

* ``GaussianVelocity``: delta_v,i i.i.d. N(0, sigma^2/N) per component.
* ``CompactVelocity``: delta_v,i = xi_i / sqrt(N) with xi_i symmetric and
  supported in the ball of radius ``delta_m`` (uniform radius times uniform
  direction).
* ``EnergySphere``: |V0 + delta_v| = |V0| exactly, |delta_v| drawn from a
  radial law on [0, r_max]; the image measure equals mu_N itself.

``NoShift`` is the degenerate delta = 0 used for exactness checks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy import integrate

from .dynamics import PhaseState, total_energy
from .gibbs import GibbsParams


@dataclass(frozen=True)
class NoShift:
    kind = "none"


@dataclass(frozen=True)
class GaussianVelocity:
    sigma: float
    kind = "gaussian"

    def __post_init__(self):
        if not self.sigma > 0.0:
            raise ValueError("sigma must be > 0")


@dataclass(frozen=True)
class CompactVelocity:
    delta_m: float
    kind = "compact"

    def __post_init__(self):
        if not self.delta_m > 0.0:
            raise ValueError("delta_m must be > 0")


@dataclass(frozen=True)
class EnergySphere:
    """Kinetic-energy preserving shift; ``r_max=None`` means sqrt(N) * delta_N."""

    r_max: float | None = None
    radial: str = "uniform"
    max_retries: int = 100
    kind = "energy_sphere"

    def __post_init__(self):
        if self.r_max is not None and not self.r_max > 0.0:
            raise ValueError("r_max must be > 0")
        if self.radial not in ("uniform", "fixed"):
            raise ValueError("radial law must be 'uniform' or 'fixed'")


ShiftSpec = Union[NoShift, GaussianVelocity, CompactVelocity, EnergySphere]


class ShiftInfeasible(RuntimeError):
    pass


@dataclass
class ShiftSample:
    delta_x: np.ndarray
    delta_v: np.ndarray

    @property
    def norm1(self) -> float:
        n = len(self.delta_v)
        return float(np.sum(np.linalg.norm(self.delta_x, axis=1))
                     + np.sum(np.linalg.norm(self.delta_v, axis=1))) / (2.0 * n)


def _unit_vectors(rng, n):
    g = rng.standard_normal((n, 3))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def draw_shift(spec: ShiftSpec, z0: PhaseState, rng, delta_n: float | None = None) -> ShiftSample:
    n = z0.n
    dx = np.zeros((n, 3))
    if isinstance(spec, NoShift):
        return ShiftSample(dx, np.zeros((n, 3)))
    if isinstance(spec, GaussianVelocity):
        return ShiftSample(dx, spec.sigma / math.sqrt(n) * rng.standard_normal((n, 3)))
    if isinstance(spec, CompactVelocity):
        radius = spec.delta_m * rng.random(n)
        return ShiftSample(dx, (radius[:, None] * _unit_vectors(rng, n)) / math.sqrt(n))
    if isinstance(spec, EnergySphere):
        return ShiftSample(dx, _energy_sphere(spec, z0, rng, delta_n))
    raise TypeError(f"unknown shift spec {spec!r}")


def _energy_sphere(spec: EnergySphere, z0: PhaseState, rng, delta_n):
    n = z0.n
    v0 = z0.velocities.ravel()
    speed = float(np.linalg.norm(v0))
    if speed == 0.0:
        raise ShiftInfeasible("energy-sphere shift needs V0 != 0")
    r_max = spec.r_max
    if r_max is None:
        if delta_n is None:
            raise ValueError("EnergySphere without r_max needs delta_n")
        r_max = math.sqrt(n) * delta_n
    for _ in range(spec.max_retries):
        r = r_max if spec.radial == "fixed" else r_max * rng.random()
        if r <= 2.0 * speed:
            break
    else:
        raise ShiftInfeasible(f"radius above 2|V0| = {2 * speed:.3g} after {spec.max_retries} draws")
    u = v0 / speed
    along = -r * r / (2.0 * speed)
    ortho = math.sqrt(max(r * r - along * along, 0.0))
    g = rng.standard_normal(3 * n)
    g -= np.dot(g, u) * u
    g /= np.linalg.norm(g)
    new = v0 + along * u + ortho * g
    # project back onto the sphere |V| = |V0| to kill rounding
    new *= speed / np.linalg.norm(new)
    return (new - v0).reshape(n, 3)


def apply_shift(z0: PhaseState, sample: ShiftSample) -> PhaseState:
    return PhaseState(z0.positions + sample.delta_x, z0.velocities + sample.delta_v)


# ---------------------------------------------------------------------------
# image measure


def beta_prime_gaussian(beta, sigma, n):
    return beta * (1.0 - 1.0 / (1.0 + n / (beta * sigma**2)))


def beta_prime_compact(beta, delta_m, n):
    if not n > beta * delta_m**2:
        raise ValueError("compact-support bound needs N > beta * delta_m^2")
    return beta * (1.0 - beta * delta_m**2 / n)


def tilde_mu_closed_form(params: GibbsParams, spec: GaussianVelocity, z0: PhaseState) -> float:
    """mu~_N(Z0) / mu_N(Z0) for the Gaussian velocity shift.

    (1 + beta sigma^2/N)^(-3N/2) exp(beta E_kin / (1 + N/(beta sigma^2)))
    """
    if not isinstance(spec, GaussianVelocity):
        raise TypeError("closed form exists for GaussianVelocity only")
    return math.exp(log_tilde_mu_ratio(params, spec, z0.kinetic()))


def log_tilde_mu_ratio(params: GibbsParams, spec: GaussianVelocity, ekin: float) -> float:
    b, s2, n = params.beta, spec.sigma**2, params.n
    return -1.5 * n * math.log1p(b * s2 / n) + b * ekin / (1.0 + n / (b * s2))


def tilde_mu_quadrature(beta, sigma, velocity) -> float:
    """mu~/mu at N = 1, C = 0 by direct quadrature of the shifted density.

    mu~(v) = int mu(v - w) psi(w) dw with mu the N(0, 1/beta) Maxwellian
    and psi the N(0, sigma^2) shift law; both factor over components, so
    the 3-d integral is a product of 1-d adaptive quadratures.
    """
    v = np.asarray(velocity, dtype=float)
    s_mu = 1.0 / math.sqrt(beta)

    def gauss(x, s):
        return math.exp(-0.5 * (x / s) ** 2) / (s * math.sqrt(2.0 * math.pi))

    ratio = 1.0
    for c in v:
        val, _ = integrate.quad(lambda w: gauss(c - w, s_mu) * gauss(w, sigma),
                                -np.inf, np.inf, epsabs=0.0, epsrel=1e-13, limit=200)
        ratio *= val / gauss(c, s_mu)
    return ratio


def k_beta_constants(beta, sigma, phi_min):
    """Both printed variants of the Gaussian-shift constant."""
    base = math.exp(-beta**2 * sigma**2 * phi_min / 4.0)
    return {
        "K_statement": base * math.exp(0.75 * beta * sigma**2),
        "K_proof": base * math.exp(-0.75 * beta * sigma**2),
    }


def verify_condition_psi2(params: GibbsParams, spec: ShiftSpec, states, rng=None, draws_per_state=1):
    """Check that the shifted law is dominated by a hotter Gibbs measure.

    Gaussian shift: for every state, evaluates the bound on
    mu~_N(Z0) / mu_N^{beta'}(Z0) obtained from the closed form with
    B_N(beta')/B_N(beta) <= (beta/beta')^(3N/2), and compares the largest
    value with the stated constant.  Energy-sphere shift: draws shifts and
    confirms kinetic energy, hence mu_N, is unchanged (K = 1).
    """
    beta, n, phi_min = params.beta, params.n, params.spec.phi_min
    if isinstance(spec, EnergySphere):
        rng = rng if rng is not None else np.random.default_rng(0)
        worst = 0.0
        count = 0
        for z in states:
            for _ in range(draws_per_state):
                d = draw_shift(spec, z, rng, delta_n=n ** -0.5)
                e0 = z.kinetic()
                e1 = 0.5 * float(np.sum((z.velocities + d.delta_v) ** 2))
                worst = max(worst, abs(e1 - e0))
                count += 1
        return {
            "check": "condition_psi",
            "shift": "energy_sphere",
            "K": 1.0,
            "draws": count,
            "max_kinetic_change": worst,
            "status": "pass" if worst <= 1e-12 * max(1.0, 1.5 * n / beta) else "fail",
        }
    if isinstance(spec, GaussianVelocity):
        bp = beta_prime_gaussian(beta, spec.sigma, n)
        log_b_ratio = 1.5 * n * math.log(beta / bp)
        logs = []
        for z in states:
            rep = total_energy(z, params.spec)
            log_ratio = (log_b_ratio + log_tilde_mu_ratio(params, spec, rep.kinetic)
                         - beta * rep.total + bp * rep.total)
            logs.append(log_ratio)
        consts = k_beta_constants(beta, spec.sigma, phi_min)
        emp = math.exp(max(logs))
        return {
            "check": "condition_psi2",
            "shift": "gaussian",
            "beta": beta,
            "beta_prime": bp,
            "n": n,
            "sigma": spec.sigma,
            "phi_min": phi_min,
            "states": len(logs),
            "empirical_max_ratio": emp,
            **consts,
            "status": "pass" if emp <= consts["K_statement"] else "fail",
        }
    if isinstance(spec, CompactVelocity):
        bp = beta_prime_compact(beta, spec.delta_m, n)
        log_b_ratio = 1.5 * n * math.log(beta / bp)
        logs = [log_b_ratio - (beta - bp) * total_energy(z, params.spec).potential for z in states]
        # sigma is undefined in the printed compact-support constant; delta_m stands in
        k = math.exp(-beta**2 * spec.delta_m**2 * phi_min / 2.0) * math.exp(1.5 * beta * spec.delta_m**2)
        emp = math.exp(max(logs))
        return {
            "check": "condition_psi2",
            "shift": "compact",
            "beta": beta,
            "beta_prime": bp,
            "n": n,
            "delta_m": spec.delta_m,
            "states": len(logs),
            "empirical_max_ratio": emp,
            "K_statement": k,
            "status": "pass" if emp <= k else "fail",
        }
    raise TypeError(f"no condition check for {spec!r}")
