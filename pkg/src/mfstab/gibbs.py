"""Gibbs equilibrium mu_N ~ exp(-beta H_N) and checks of its bounds.

mu_N factorizes: velocities are i.i.d. Gaussians of variance 1/beta per
component, positions follow nu_N ~ exp(-beta E_pot), sampled here with a
single-particle Metropolis chain.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .dynamics import PhaseState
from .potential import PotentialSpec, potential_value


@dataclass(frozen=True)
class GibbsParams:
    beta: float
    n: int
    spec: PotentialSpec

    def __post_init__(self):
        if not self.beta > 0.0:
            raise ValueError("beta must be > 0")
        if self.n < 1:
            raise ValueError("n must be >= 1")


@dataclass(frozen=True)
class ChainConfig:
    """Metropolis settings; burn-in and thinning are counted in sweeps of n moves."""

    burn_in_sweeps: int = 10_000
    thin_sweeps: int = 1
    target_acceptance: float = 0.3
    initial_step: float = 0.1
    max_step: float = 0.5
    adapt_every: int = 50
    singular_floor: float = 1e-6
    n_windows: int = 4

    def __post_init__(self):
        if self.burn_in_sweeps < 0 or self.thin_sweeps < 1:
            raise ValueError("burn_in_sweeps >= 0 and thin_sweeps >= 1 required")
        if not 0.0 < self.target_acceptance < 1.0:
            raise ValueError("target_acceptance must lie in (0, 1)")
        if not 0.0 < self.initial_step <= self.max_step:
            raise ValueError("need 0 < initial_step <= max_step")


@dataclass
class ChainDiagnostics:
    acceptance_rate: float
    burn_in: int  # single-particle moves
    thinning: int  # single-particle moves between kept samples
    window_means: list[float]
    stationary: bool
    step: float
    step_capped: bool
    window_stderr: list[float] = field(default_factory=list)

    def to_dict(self):
        return dict(self.__dict__)


def sample_velocities(params: GibbsParams, rng) -> np.ndarray:
    return rng.standard_normal((params.n, 3)) / math.sqrt(params.beta)


def _batch_stderr(x, batches=10):
    if len(x) < 2 * batches:
        return float(np.std(x) / math.sqrt(max(len(x), 1)))
    means = np.array([b.mean() for b in np.array_split(x, batches)])
    return float(np.std(means, ddof=1) / math.sqrt(batches))


def _stationarity(trace, n_windows):
    windows = np.array_split(np.asarray(trace), n_windows)
    means = [float(w.mean()) for w in windows]
    errs = [_batch_stderr(w) for w in windows]
    ok = True
    for a in range(n_windows):
        for b in range(a + 1, n_windows):
            se = math.hypot(errs[a], errs[b])
            diff = abs(means[a] - means[b])
            if diff > 5.0 * se and diff > 1e-12 * (1.0 + abs(means[a])):
                ok = False
    return means, errs, ok


def sample_positions_mcmc(params: GibbsParams, chain: ChainConfig, rng, n_samples=1):
    """Metropolis draws from nu_N ~ exp(-beta E_pot).

    Returns an array of shape (n_samples, n, 3) and the chain diagnostics.
    The proposal scale adapts during burn-in only.
    """
    n = params.n
    p = params.spec.params()
    floor = chain.singular_floor if params.spec.singular else -1.0
    pos = np.ascontiguousarray(rng.random((n, 3)))
    step = chain.initial_step
    trace_burn = np.empty(chain.burn_in_sweeps)
    done = 0
    last_acc = float("nan")
    while done < chain.burn_in_sweeps:
        k = min(chain.adapt_every, chain.burn_in_sweeps - done)
        normals = rng.standard_normal((k, n, 3))
        uniforms = rng.random((k, n))
        acc = _kernels.metropolis(pos, p, params.beta, step, normals, uniforms,
                                  floor, trace_burn[done:done + k])
        last_acc = acc / (k * n)
        step = min(max(step * math.exp(last_acc - chain.target_acceptance), 1e-4),
                   chain.max_step)
        done += k
    capped = step >= chain.max_step

    out = np.empty((n_samples, n, 3))
    trace = np.empty(n_samples * chain.thin_sweeps)
    accepted = 0
    block = max(1, 4096 // chain.thin_sweeps)
    s = 0
    while s < n_samples:
        b = min(block, n_samples - s)
        normals = rng.standard_normal((b, chain.thin_sweeps, n, 3))
        uniforms = rng.random((b, chain.thin_sweeps, n))
        for q in range(b):
            lo = (s + q) * chain.thin_sweeps
            accepted += _kernels.metropolis(pos, p, params.beta, step, normals[q],
                                            uniforms[q], floor,
                                            trace[lo:lo + chain.thin_sweeps])
            out[s + q] = pos
        s += b
    acc_rate = accepted / (n_samples * chain.thin_sweeps * n)

    seg = trace if len(trace) >= 8 * chain.n_windows else trace_burn[len(trace_burn) // 2:]
    if len(seg) >= chain.n_windows:
        means, errs, ok = _stationarity(seg, chain.n_windows)
    else:
        means, errs, ok = [], [], True
    diag = ChainDiagnostics(
        acceptance_rate=float(acc_rate),
        burn_in=chain.burn_in_sweeps * n,
        thinning=chain.thin_sweeps * n,
        window_means=means,
        window_stderr=errs,
        stationary=ok,
        step=step,
        step_capped=capped,
    )
    return out, diag


def sample_gibbs(params: GibbsParams, chain: ChainConfig, rng, velocity_rng=None):
    """One state from mu_N: chain positions plus independent Gaussian velocities."""
    x, diag = sample_positions_mcmc(params, chain, rng, 1)
    v = sample_velocities(params, velocity_rng if velocity_rng is not None else rng)
    return PhaseState(x[0], v), diag


def sample_gibbs_chain(params: GibbsParams, chain: ChainConfig, rng, count, velocity_rng=None):
    """``count`` thinned states from one chain (positions correlated across states)."""
    x, diag = sample_positions_mcmc(params, chain, rng, count)
    vrng = velocity_rng if velocity_rng is not None else rng
    return [PhaseState(xi, sample_velocities(params, vrng)) for xi in x], diag


# ---------------------------------------------------------------------------
# bound checks


def cube_integral(fn, n):
    """Integral of ``fn`` over the cell [-1/2, 1/2]^3.

    The cell is split into six pyramids with apex at the origin; each is
    mapped to (t, a, b) -> t (a, b, 1/2) with t = s^2, and integrated by
    tensor Gauss-Legendre.  The apex substitution keeps integrands like
    r^(1-alpha) near the origin smooth in s.
    """
    w = 0.5
    xs, ws = np.polynomial.legendre.leggauss(n)
    s = 0.5 * (xs + 1.0)
    s_w = 0.5 * ws
    t = s * s
    a = w * xs
    a_w = w * ws
    T, A, B = np.meshgrid(t, a, a, indexing="ij")
    weight = (np.einsum("i,j,k->ijk", s_w * 2.0 * s, a_w, a_w) * T**2 * w).ravel()
    total = 0.0
    for axis in range(3):
        for sign in (1.0, -1.0):
            pts = np.empty((T.size, 3))
            others = [k for k in range(3) if k != axis]
            pts[:, axis] = sign * w * T.ravel()
            pts[:, others[0]] = (T * A).ravel()
            pts[:, others[1]] = (T * B).ravel()
            total += float(np.sum(fn(pts) * weight))
    return total


def verify_partition_bounds(params: GibbsParams, n0=16, rel_tol=5e-3):
    """Two-sided bounds (2pi/b)^(3N/2) <= B_N <= (2pi e^(-b phi_min/3)/b)^(3N/2) at N = 2.

    B_2 = (2pi/beta)^3 * int_T3 exp(-beta phi(r)/2) dr by translation
    invariance.  The integral is computed at n0, 2 n0, 4 n0 points per
    axis; the last difference is the error estimate.
    """
    if params.n != 2:
        raise ValueError("partition bounds are checked by quadrature at n = 2 only")
    spec, beta = params.spec, params.beta

    def integrand(y):
        # Gauss nodes never hit the apex, so y != 0
        return np.exp(-0.5 * beta * potential_value(spec, y))

    vals = [cube_integral(integrand, n0 * 2**k) for k in range(3)]
    b2x = vals[-1]
    err = abs(vals[2] - vals[1])
    prev = abs(vals[1] - vals[0])
    rel_err = err / abs(b2x)
    # ratio test only matters once the error is near tolerance
    converged = rel_err < rel_tol and (err <= prev or rel_err < 1e-3 * rel_tol)
    gauss = (2.0 * math.pi / beta) ** 3
    b2 = gauss * b2x
    lower = gauss
    upper = (2.0 * math.pi * math.exp(-beta * spec.phi_min / 3.0) / beta) ** 3
    lower_margin = (b2 - lower) / lower
    upper_margin = (upper - b2) / upper
    tol = rel_err + 1e-12
    if not converged:
        status = "inconclusive"
    elif lower_margin >= -tol and upper_margin >= -tol:
        status = "pass"
    else:
        status = "fail"
    return {
        "check": "partition_bounds",
        "n": 2,
        "beta": beta,
        "alpha": spec.alpha,
        "amplitude": spec.amplitude,
        "phi_min": spec.phi_min,
        "B2": b2,
        "B2X_sequence": vals,
        "lower_bound": lower,
        "upper_bound": upper,
        "lower_margin": lower_margin,
        "upper_margin": upper_margin,
        "quadrature_rel_error": rel_err,
        "status": status,
    }


def c_beta_marginal(beta, phi_min):
    """Marginal-bound constant exp(-beta phi_min)."""
    return math.exp(-beta * phi_min)


def _hist_density(points, bins, lo, hi):
    counts, _ = np.histogramdd(points, bins=bins, range=[(lo, hi)] * 3)
    return counts


def verify_marginal_bounds(params: GibbsParams, k, samples, bins=8, min_count=20):
    """Histogram check of nu_N^k <= c_beta^k for k in {1, 2}.

    ``samples`` is an (m, n, 3) array of position draws.  For k = 2 the
    histogram is over pair displacements X_j - X_i, which is the 2-marginal
    up to the uniform law of X_i.  Bins are widened until every bin holds at
    least ``min_count`` points.
    """
    if k not in (1, 2):
        raise ValueError("only k = 1, 2 are histogram-estimable")
    samples = np.asarray(samples)
    m, n, _ = samples.shape
    notes = []
    if k == 1:
        pts = samples.reshape(-1, 3)
        lo, hi = 0.0, 1.0

        def counts_for(b):
            return _hist_density(pts, b, lo, hi), len(pts)
    else:
        if n < 2:
            raise ValueError("k = 2 needs n >= 2")
        iu = np.triu_indices(n, 1)
        lo, hi = -0.5, 0.5

        def counts_for(b):
            acc = np.zeros((b, b, b))
            total = 0
            for chunk in np.array_split(np.arange(m), max(1, m // 2000)):
                d = pair_displacements_batch(samples[chunk])[:, iu[0], iu[1]]
                d = np.concatenate([d, -d], axis=1).reshape(-1, 3)
                acc += _hist_density(d, b, lo, hi)
                total += len(d)
            return acc, total

    b = bins
    while True:
        counts, total = counts_for(b)
        if counts.min() >= min_count or b == 1:
            break
        notes.append(f"bins {b}^3 had a bin below {min_count} counts; widened")
        b -= 1
    vol = ((hi - lo) / b) ** 3
    dens = counts / (total * vol)
    se = np.sqrt(counts) / (total * vol)
    bound = c_beta_marginal(params.beta, params.spec.phi_min) ** k
    idx = np.unravel_index(np.argmax(dens), dens.shape)
    excess = float(np.max(dens - 3.0 * se - bound))
    report = {
        "check": "marginal_bounds",
        "k": k,
        "n": n,
        "beta": params.beta,
        "samples": m,
        "bins": b,
        "bound": bound,
        "max_density": float(dens[idx]),
        "max_density_stderr": float(se[idx]),
        "min_density": float(dens.min()),
        "status": "pass" if excess <= 0.0 else "fail",
        "notes": notes,
        "histogram": {"lo": lo, "hi": hi, "density": dens, "stderr": se},
    }
    if k == 2:
        report.update(small_distance_density(samples, min_count))
        report["small_distance_ratio"] = report["small_r_density"] / bound
    return report


def pair_displacements_batch(samples):
    x = np.asarray(samples)
    d = x[:, :, None, :] - x[:, None, :, :]
    return d - np.floor(d + 0.5)


def small_distance_density(samples, min_count=20):
    """Pair density in the smallest ball around 0 holding ``min_count`` pairs."""
    samples = np.asarray(samples)
    m, n, _ = samples.shape
    iu = np.triu_indices(n, 1)
    r = []
    for chunk in np.array_split(np.arange(m), max(1, m // 2000)):
        d = pair_displacements_batch(samples[chunk])[:, iu[0], iu[1]]
        r.append(np.linalg.norm(d, axis=-1).ravel())
    r = np.sort(np.concatenate(r))
    total = len(r)
    r0 = min(float(r[min(min_count, total) - 1]), 0.5)
    count = int(np.searchsorted(r, r0, side="right"))
    vol = 4.0 / 3.0 * math.pi * r0**3
    # each unordered pair contributes its two displacements +-d
    return {
        "small_r_radius": r0,
        "small_r_count": count,
        "small_r_density": count / (total * vol),
        "small_r_stderr": math.sqrt(count) / (total * vol),
    }
