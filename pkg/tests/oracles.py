"""Independent reference computations used only by the tests.

Nothing here imports the compiled kernels; everything is plain numpy/scipy
written from the defining formulas.
"""

import itertools
import math

import numpy as np
from scipy import integrate

IMAGES27 = np.array(list(itertools.product((-1, 0, 1), repeat=3)), dtype=float)


def min_image_bruteforce(a, b):
    """Shortest of the 27 image displacements a - b + k."""
    d = np.asarray(a, float) - np.asarray(b, float)
    cands = d[..., None, :] + IMAGES27
    k = np.argmin(np.linalg.norm(cands, axis=-1), axis=-1)
    return np.take_along_axis(cands, k[..., None, None], axis=-2)[..., 0, :]


def smoothstep5(u):
    u = np.clip(u, 0.0, 1.0)
    return 1.0 - (10 * u**3 - 15 * u**4 + 6 * u**5)


def phi_reference(x, alpha, amp=1.0, taper_radius=0.5, cutoff=0.5, shells=1, shift=0.0):
    """phi(x) straight from the definition: image sum, taper, mean shift."""
    x = np.asarray(x, float)
    d = x - np.floor(x + 0.5)
    if taper_radius is not None:
        r = np.linalg.norm(d, axis=-1)
        r_on = taper_radius / 2
        s = smoothstep5((r - r_on) / (cutoff - r_on))
        return amp * r ** (1 - alpha) * s - shift
    total = 0.0
    rng = range(-shells, shells + 1)
    for k in itertools.product(rng, rng, rng):
        r = np.linalg.norm(d + np.array(k, float), axis=-1)
        total = total + amp * r ** (1 - alpha)
    return total - shift


def fd_gradient(fn, x, h=1e-6):
    x = np.asarray(x, float)
    g = np.zeros_like(x)
    for k in range(x.shape[-1]):
        e = np.zeros(x.shape[-1])
        e[k] = h
        g[..., k] = (fn(x + e) - fn(x - e)) / (2 * h)
    return g


def epot_reference(pos, phi):
    """(1/(2N)) sum_{i != j} phi(X_i - X_j) by explicit double loop."""
    n = len(pos)
    e = 0.0
    for i in range(n):
        for j in range(n):
            if i != j:
                e += phi(pos[i] - pos[j])
    return e / (2 * n)


def cube_sphere_area(r):
    """Area of {|y| = r} inside [-1/2, 1/2]^3 (for r <= sqrt(3)/2).

    Computed as an integral over the polar angle of the part of each
    latitude circle that stays in the cube, exploiting octant symmetry.
    """
    if r <= 0.5:
        return 4 * math.pi * r * r
    h = 0.5

    def arc(theta):
        z = r * math.cos(theta)
        rho = r * math.sin(theta)
        if z > h or rho == 0.0:
            return 0.0
        # fraction of the circle of radius rho with |x|, |y| <= h, first quadrant
        if rho <= h:
            return math.pi / 2
        if rho >= math.sqrt(2) * h:
            return 0.0
        lo = math.acos(h / rho)
        return max(math.pi / 2 - 2 * lo, 0.0)

    val, _ = integrate.quad(lambda t: arc(t) * r * r * math.sin(t), 0.0, math.pi / 2,
                            limit=200, points=[math.acos(min(h / r, 1.0))])
    return 8 * val


def pair_distance_density(r_edges, phi_of_r, beta):
    """Law of the minimal-image pair distance at N = 2 integrated over bins.

    Density proportional to exp(-beta phi(r)/2) times the cube shell area.
    """
    top = math.sqrt(3) / 2
    w = lambda r: math.exp(-0.5 * beta * phi_of_r(r)) * cube_sphere_area(r)
    pts = [0.5, 0.5 * math.sqrt(2)]
    z, _ = integrate.quad(w, 0.0, top, points=pts, limit=400)
    probs = []
    for a, b in zip(r_edges[:-1], r_edges[1:]):
        inner = [p for p in pts if a < p < b]
        v, _ = integrate.quad(w, a, b, points=inner or None, limit=200)
        probs.append(v / z)
    return np.array(probs)


def free_flight(pos, vel, t):
    return (np.asarray(pos) + t * np.asarray(vel)) % 1.0
