"""Unit-torus geometry and the periodized repulsive pair potential.

The pair potential is a power law ``C / r**(alpha - 1)`` summed over a finite
set of periodic images, optionally multiplied by a C^2 quintic taper that
switches it off between ``r_on = taper_radius / 2`` and ``cutoff``, and
shifted by a constant so that it integrates to zero over the torus.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate

from . import _kernels


class SingularityError(ValueError):
    """Raised when a singular potential is evaluated at zero separation."""


# ---------------------------------------------------------------------------
# torus geometry


def wrap_positions(x):
    """Map coordinates into [0, 1)."""
    x = np.asarray(x, dtype=float)
    y = x - np.floor(x)
    return np.where(y >= 1.0, 0.0, y)


def torus_displacement(a, b):
    """Minimal-image representative of ``a - b`` (components in [-1/2, 1/2])."""
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    return d - np.floor(d + 0.5)


def torus_distance(a, b):
    return np.linalg.norm(torus_displacement(a, b), axis=-1)


def pair_displacements(pos):
    """All minimal-image displacements ``X_i - X_j`` as an (n, n, 3) array."""
    pos = np.asarray(pos, dtype=float)
    return torus_displacement(pos[:, None, :], pos[None, :, :])


def distance_matrix(pos):
    return np.linalg.norm(pair_displacements(pos), axis=-1)


# ---------------------------------------------------------------------------
# potential


@dataclass(frozen=True)
class PotentialSpec:
    """Parameters of the periodized pair potential.

    ``taper_radius=None`` disables the taper; the sum then runs over the
    ``image_shells`` shells of images around the minimal image.  With the
    taper on and ``cutoff <= 1/2`` only the minimal image can contribute.
    Use :meth:`build` to get ``mean_shift`` and ``phi_min`` calibrated.
    """

    alpha: float
    amplitude: float = 1.0
    image_shells: int = 1
    taper_radius: float | None = 0.5
    cutoff: float = 0.5
    mean_shift: float = 0.0
    phi_min: float = float("nan")

    def __post_init__(self):
        if not (0.0 < self.alpha < 2.0):
            raise ValueError(
                f"alpha={self.alpha!r} outside (0, 2); the stability estimate "
                "requires alpha < 2"
            )
        if self.amplitude < 0.0:
            raise ValueError("amplitude must be >= 0 (repulsive potentials only)")
        if int(self.image_shells) != self.image_shells or self.image_shells < 0:
            raise ValueError("image_shells must be a nonnegative integer")
        if not (0.0 < self.cutoff <= 0.5):
            raise ValueError("cutoff must lie in (0, 1/2]")
        if self.taper_radius is not None:
            if not (0.0 <= self.taper_radius <= 1.0):
                raise ValueError("taper_radius is a fraction of 1/2 and must lie in [0, 1]")
            if self.taper_onset >= self.cutoff:
                raise ValueError("taper onset taper_radius/2 must be below the cutoff")

    @classmethod
    def build(cls, alpha, amplitude=1.0, image_shells=1, taper_radius=0.5,
              cutoff=0.5, zero_mean=True, phi_min_resolution=256):
        """Construct a spec with the zero-mean shift and phi_min computed."""
        spec = cls(alpha=alpha, amplitude=amplitude, image_shells=image_shells,
                   taper_radius=taper_radius, cutoff=cutoff)
        if zero_mean:
            spec = dataclasses.replace(spec, mean_shift=float(raw_mean(spec)))
        return dataclasses.replace(
            spec, phi_min=estimate_phi_min(spec, resolution=phi_min_resolution))

    @property
    def tapered(self) -> bool:
        return self.taper_radius is not None

    @property
    def taper_onset(self) -> float:
        return 0.5 * self.taper_radius if self.tapered else math.inf

    @property
    def singular(self) -> bool:
        return self.alpha > 1.0 and self.amplitude > 0.0

    @property
    def effective_shells(self) -> int:
        # images beyond the minimal one are at distance >= 1/2 >= cutoff
        return 0 if self.tapered else int(self.image_shells)

    @property
    def interaction_range(self) -> float:
        return self.cutoff if self.tapered else math.inf

    def params(self) -> np.ndarray:
        """Flat parameter vector consumed by the compiled kernels."""
        return np.array([
            self.alpha,
            self.amplitude,
            float(self.effective_shells),
            1.0 if self.tapered else 0.0,
            self.taper_onset if self.tapered else 0.0,
            self.cutoff,
            self.mean_shift,
        ])

    def to_dict(self):
        return dataclasses.asdict(self)


def _as_disp(x):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != 3:
        raise ValueError("displacements must have a trailing axis of length 3")
    return x


def _evaluate(spec: PotentialSpec, x):
    x = _as_disp(x)
    flat = torus_displacement(x.reshape(-1, 3), 0.0)
    if spec.singular and np.any(np.all(flat == 0.0, axis=1)):
        raise SingularityError("potential evaluated at zero separation")
    phi = np.empty(len(flat))
    grad = np.empty_like(flat)
    _kernels.eval_pairs(np.ascontiguousarray(flat), spec.params(), phi, grad)
    return phi.reshape(x.shape[:-1]), grad.reshape(x.shape)


def potential_value(spec: PotentialSpec, x):
    """phi at displacement(s) ``x`` (reduced to the minimal image first)."""
    return _evaluate(spec, x)[0]


def force(spec: PotentialSpec, x):
    """Pair force K = -grad phi at displacement(s) ``x``."""
    x = _as_disp(x)
    if spec.amplitude > 0.0 and np.any(np.all(torus_displacement(x, 0.0) == 0.0, axis=-1)):
        raise SingularityError("force evaluated at zero separation")
    return -_evaluate(spec, x)[1]


def radial_profile(spec: PotentialSpec, r):
    """phi along the x axis; equals phi(|x|) whenever only one image counts."""
    r = np.atleast_1d(np.asarray(r, dtype=float))
    x = np.zeros((len(r), 3))
    x[:, 0] = r
    return potential_value(spec, x)


# ---------------------------------------------------------------------------
# calibration


def _taper(spec, r):
    if not spec.tapered:
        return np.ones_like(r)
    r_on, r_c = spec.taper_onset, spec.cutoff
    u = np.clip((r - r_on) / (r_c - r_on), 0.0, 1.0)
    return 1.0 - u**3 * (10.0 - 15.0 * u + 6.0 * u * u)


def _raw_radial(spec, r):
    r = np.asarray(r, dtype=float)
    return spec.amplitude * r ** (1.0 - spec.alpha) * _taper(spec, r)


def raw_mean(spec: PotentialSpec) -> float:
    """Integral over the torus of phi before the mean shift is applied."""
    if spec.amplitude == 0.0:
        return 0.0
    if spec.tapered:
        # support is the ball of radius cutoff <= 1/2, inside the unit cell
        pts = [spec.taper_onset] if spec.taper_onset < spec.cutoff else None
        val, _ = integrate.quad(
            lambda r: 4.0 * math.pi * r**2 * float(_raw_radial(spec, r)),
            0.0, spec.cutoff, points=pts, epsabs=1e-14, epsrel=1e-13, limit=200)
        return val
    # untapered power law over the (2s+1)-cube: one pyramid per face, the
    # radial part integrates in closed form
    w = (2 * spec.image_shells + 1) / 2.0
    nodes, weights = np.polynomial.legendre.leggauss(96)
    a = w * nodes
    wa = w * weights
    aa, bb = np.meshgrid(a, a, indexing="ij")
    rho = np.sqrt(aa**2 + bb**2 + w**2)
    face = np.sum(np.outer(wa, wa) * rho ** (1.0 - spec.alpha))
    return 6.0 * w * spec.amplitude / (4.0 - spec.alpha) * face


def estimate_phi_min(spec: PotentialSpec, resolution=256) -> float:
    """Grid minimum of phi minus a Lipschitz safety margin.

    The grid covers the fundamental wedge 0 <= z <= y <= x <= 1/2 of the
    cell (phi has the cube's symmetry) with spacing ``1/resolution``,
    i.e. ``resolution**3`` effective points over the torus.
    """
    if spec.amplitude == 0.0:
        return -spec.mean_shift
    h = 1.0 / resolution
    g = np.arange(0, resolution // 2 + 1) * h
    x, y, z = np.meshgrid(g, g, g, indexing="ij")
    keep = (z <= y) & (y <= x)
    pts = np.stack([x[keep], y[keep], z[keep]], axis=1)
    pts = pts[np.linalg.norm(pts, axis=1) > 0.0]
    phi, grad = _evaluate(spec, pts)
    k = int(np.argmin(phi))
    # local Lipschitz constant over the points within one grid diagonal
    near = np.linalg.norm(pts - pts[k], axis=1) <= 2.0 * math.sqrt(3.0) * h
    lip = float(np.max(np.linalg.norm(grad[near], axis=1)))
    margin = lip * math.sqrt(3.0) * h / 2.0
    return float(phi[k]) - margin


def certify_derivative_bounds(spec: PotentialSpec, r_min=1e-4, r_max=0.5,
                              points=400, fd_rel_step=1e-4):
    """Smallest constants in phi <= C0/r^(a-1), |grad| <= C1/r^a, |hess| <= C2/r^(a+1).

    Sampled on a log grid of radii along the axis, face-diagonal and
    body-diagonal directions.  The Hessian is a central difference of the
    analytic gradient; its spectral norm is used.
    """
    a = spec.alpha
    radii = np.geomspace(r_min, r_max, points)
    dirs = np.array([[1.0, 0.0, 0.0], [1.0, 1.0, 0.0], [1.0, 1.0, 1.0]])
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    c0 = c1 = c2 = -math.inf
    for u in dirs:
        x = radii[:, None] * u[None, :]
        phi, grad = _evaluate(spec, x)
        c0 = max(c0, float(np.max(phi * radii ** (a - 1.0))))
        c1 = max(c1, float(np.max(np.linalg.norm(grad, axis=1) * radii**a)))
        hess = np.empty((len(radii), 3, 3))
        for k in range(3):
            e = np.zeros(3)
            e[k] = 1.0
            step = (fd_rel_step * radii)[:, None] * e[None, :]
            hess[:, :, k] = (_evaluate(spec, x + step)[1] - _evaluate(spec, x - step)[1]) / (
                2.0 * fd_rel_step * radii[:, None])
        hess = 0.5 * (hess + np.transpose(hess, (0, 2, 1)))
        norm2 = np.max(np.abs(np.linalg.eigvalsh(hess)), axis=1)
        c2 = max(c2, float(np.max(norm2 * radii ** (a + 1.0))))
    consts = {"C0": c0, "C1": max(c1, 0.0), "C2": max(c2, 0.0)}
    return {
        "alpha": a,
        "r_range": [r_min, r_max],
        "points": points,
        "constants": consts,
        "finite": all(math.isfinite(v) for v in consts.values()),
    }
