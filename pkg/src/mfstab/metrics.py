"""Divergence of paired trajectories: the averaged log-distance Q(t).

    Q(t) = E_{Z0 ~ mu_N, delta ~ psi_N} ln(1 + ||Z(t, Z0) - Z(t, Z0 + delta)||_1 / delta_N)

with ||Z||_1 = (1/2N) sum_i (|X_i| + |V_i|), positions measured by torus
geodesic distance.  Besides Q itself, every sample also records the
near-field / far-field force diagnostics built on nearest-neighbour sets.
"""

from __future__ import annotations

import logging
import math
import warnings
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .dynamics import IntegratorConfig, PhaseState, evolve_pair, integrate
from .gibbs import ChainConfig, GibbsParams, sample_gibbs
from .potential import PotentialSpec, force, pair_displacements
from .seeding import stream
from .shifts import ShiftSpec, apply_shift, draw_shift

log = logging.getLogger(__name__)


def norm1(z: PhaseState, z_shifted: PhaseState) -> float:
    if z.n != z_shifted.n:
        raise ValueError("states have different particle numbers")
    d = z.positions - z_shifted.positions
    d -= np.floor(d + 0.5)
    dx = np.linalg.norm(d, axis=1)
    dv = np.linalg.norm(z.velocities - z_shifted.velocities, axis=1)
    return float(np.sum(dx) + np.sum(dv)) / (2.0 * z.n)


def _split_norms(z, zs):
    d = z.positions - zs.positions
    d -= np.floor(d + 0.5)
    px = float(np.sum(np.linalg.norm(d, axis=1))) / (2.0 * z.n)
    pv = float(np.sum(np.linalg.norm(z.velocities - zs.velocities, axis=1))) / (2.0 * z.n)
    return px, pv


@dataclass(frozen=True)
class TheoremParams:
    """Exponents and neighbour count entering the growth bound.

    ``epsilon`` defaults to min(1 - alpha/3, 1/2), ``a`` to 2 alpha/3 + 0.1,
    ``L`` to ceil(36 / (2 - alpha)) capped at floor(sqrt(N)).
    """

    alpha: float
    epsilon: float | None = None
    a: float | None = None
    L: int | None = None

    def __post_init__(self):
        if self.a is not None and not self.a > 2.0 * self.alpha / 3.0:
            raise ValueError("exponent a must exceed 2 alpha / 3")
        if self.L is not None and self.L < 1:
            raise ValueError("L must be >= 1")

    @property
    def eps(self) -> float:
        if self.epsilon is None:
            return min(1.0 - self.alpha / 3.0, 0.5)
        return self.epsilon

    @property
    def exponent_a(self) -> float:
        return self.a if self.a is not None else 2.0 * self.alpha / 3.0 + 0.1

    @property
    def epsilon_admissible(self) -> bool:
        return self.eps <= 1.0 - self.alpha / 3.0

    def delta_n(self, n: int) -> float:
        return n ** (-self.eps)

    def neighbor_count(self, n: int) -> tuple[int, bool]:
        """(L, capped) where capped records that sqrt(N) bound was applied."""
        if self.L is not None:
            return min(self.L, n - 1), False
        ideal = math.ceil(36.0 / (2.0 - self.alpha))
        cap = max(1, min(int(math.isqrt(n)), n - 1))
        return (ideal, False) if ideal <= cap else (cap, True)

    @staticmethod
    def c_beta(beta, phi_min):
        """exp(-beta phi_min / 2), the variant in the growth bound."""
        return math.exp(-0.5 * beta * phi_min)

    @staticmethod
    def c_beta_marginal(beta, phi_min):
        return math.exp(-beta * phi_min)

    def summary(self, n, beta=None, phi_min=None):
        L, capped = self.neighbor_count(n)
        out = {
            "alpha": self.alpha,
            "epsilon": self.eps,
            "epsilon_admissible": self.epsilon_admissible,
            "a": self.exponent_a,
            "L": L,
            "L_capped": capped,
            "L_ideal": math.ceil(36.0 / (2.0 - self.alpha)),
            "delta_N": self.delta_n(n),
            "N_regime_min": 6**4 / (2.0 - self.alpha) ** 2,
        }
        if beta is not None and phi_min is not None:
            cb = self.c_beta(beta, phi_min)
            out.update(c_beta=cb, c_beta_a=cb**self.exponent_a,
                       c_beta_marginal=self.c_beta_marginal(beta, phi_min))
        return out


# ---------------------------------------------------------------------------
# neighbour sets and diagnostics


def neighbor_sets(state_or_positions, L: int) -> np.ndarray:
    """Indices of the L nearest other particles (torus distance), ties to lower index."""
    pos = state_or_positions.positions if isinstance(state_or_positions, PhaseState) \
        else np.asarray(state_or_positions)
    n = len(pos)
    if not 0 < L < n:
        raise ValueError("need 0 < L < N")
    r = np.linalg.norm(pair_displacements(pos), axis=-1)
    r[np.diag_indices(n)] = np.inf
    return np.argsort(r, axis=1, kind="stable")[:, :L]


def _near_mask(ra, rb, L):
    n = len(ra)
    mask = np.zeros((n, n), dtype=bool)
    rows = np.arange(n)[:, None]
    mask[rows, np.argsort(ra, axis=1, kind="stable")[:, :L]] = True
    mask[rows, np.argsort(rb, axis=1, kind="stable")[:, :L]] = True
    return mask


def proof_term_values(z: PhaseState, zs: PhaseState, spec: PotentialSpec, L: int,
                      delta_n: float) -> dict[str, float]:
    """Per-configuration near-field (S1, S1^delta) and far-field (S2) integrands.

    S1   = (1/(delta_N N^2)) sum_i sum_{j in C_i u C_i^delta} |K(X_i - X_j)|
    S1^d = same with the shifted positions
    S2   = max_i (1/N) sum_{j not in C_i u C_i^delta}
               (|X_i - X_j|^-(alpha+1) + |X_i^d - X_j^d|^-(alpha+1))
    """
    n = z.n
    da = pair_displacements(z.positions)
    db = pair_displacements(zs.positions)
    ra = np.linalg.norm(da, axis=-1)
    rb = np.linalg.norm(db, axis=-1)
    diag = np.diag_indices(n)
    ra[diag] = np.inf
    rb[diag] = np.inf
    near = _near_mask(ra, rb, L)
    off = ~np.eye(n, dtype=bool)
    ka = np.zeros((n, n))
    kb = np.zeros((n, n))
    ka[off] = np.linalg.norm(force(spec, da[off]), axis=-1)
    kb[off] = np.linalg.norm(force(spec, db[off]), axis=-1)
    scale = 1.0 / (delta_n * n * n)
    p = -(spec.alpha + 1.0)
    far = off & ~near
    inv = np.where(far, ra**p + rb**p, 0.0)
    return {
        "s1": float(np.sum(ka[near])) * scale,
        "s1_delta": float(np.sum(kb[near])) * scale,
        "s2": float(np.max(np.sum(inv, axis=1))) / n,
    }


def pairing_overlap(z: PhaseState, z_shifted: PhaseState) -> float:
    """Fraction of i whose phase-space nearest neighbour in the shifted state is i."""
    if z.n != z_shifted.n:
        raise ValueError("states have different particle numbers")
    d = z.positions[:, None, :] - z_shifted.positions[None, :, :]
    d -= np.floor(d + 0.5)
    dist = np.linalg.norm(d, axis=-1) + np.linalg.norm(
        z.velocities[:, None, :] - z_shifted.velocities[None, :, :], axis=-1)
    return float(np.mean(np.argmin(dist, axis=1) == np.arange(z.n)))


def make_observers(spec: PotentialSpec, delta_n: float, L: int | None, proof_terms=True):
    """Observer callables for :func:`evolve_pair`."""
    cache = {}

    def terms(t, z, zs):
        key = (t, id(z))
        if key not in cache:
            cache.clear()
            cache[key] = proof_term_values(z, zs, spec, L, delta_n)
        return cache[key]

    def velocity_term(t, z, zs):
        # d/dt of the position part of ||.||_1 is at most (1/2N) sum |dV_i|
        px, pv = _split_norms(z, zs)
        return pv / (delta_n + px + pv)

    obs = {
        "norm1": lambda t, z, zs: norm1(z, zs),
        "position_norm": lambda t, z, zs: _split_norms(z, zs)[0],
        "velocity_norm": lambda t, z, zs: _split_norms(z, zs)[1],
        "velocity_term": velocity_term,
        "overlap": lambda t, z, zs: pairing_overlap(z, zs),
    }
    if proof_terms and L is not None:
        obs["s1"] = lambda t, z, zs: terms(t, z, zs)["s1"]
        obs["s1_delta"] = lambda t, z, zs: terms(t, z, zs)["s1_delta"]
        obs["s2"] = lambda t, z, zs: terms(t, z, zs)["s2"]
    return obs


# ---------------------------------------------------------------------------
# Monte Carlo estimator


@dataclass
class QCurve:
    times: np.ndarray
    q: np.ndarray
    stderr: np.ndarray
    m_effective: int
    delta_n: float
    epsilon: float
    rejected: int = 0
    reasons: dict = field(default_factory=dict)
    series: dict = field(default_factory=dict)  # name -> (mean, stderr)
    samples: dict = field(default_factory=dict)  # name -> (m, n_times) per-sample values
    dt_used: list = field(default_factory=list)
    chain: list = field(default_factory=list)


@dataclass
class ProofTermReport:
    times: np.ndarray
    s1: np.ndarray
    s1_stderr: np.ndarray
    s1_delta: np.ndarray
    s1_delta_stderr: np.ndarray
    s2: np.ndarray
    s2_stderr: np.ndarray
    L: int
    L_capped: bool


@dataclass(frozen=True)
class SampleTask:
    index: int
    master_seed: int
    params: GibbsParams
    chain: ChainConfig
    shift: object
    theorem: TheoremParams
    cfg: IntegratorConfig
    tau: float = 0.0
    proof_terms: bool = True
    keep_trajectories: bool = False


def run_sample(task: SampleTask) -> dict:
    """Sample (Z0, delta), evolve the pair and observe; never raises on rejection."""
    params, cfg = task.params, task.cfg
    n = params.n
    delta_n = task.theorem.delta_n(n)
    z0, diag = sample_gibbs(params, task.chain,
                            stream(task.master_seed, task.index, "positions"),
                            stream(task.master_seed, task.index, "velocities"))
    shift = draw_shift(task.shift, z0, stream(task.master_seed, task.index, "shift"),
                       delta_n=delta_n)
    zs = apply_shift(z0, shift)
    out = {"index": task.index, "chain": {"acceptance_rate": diag.acceptance_rate,
                                          "stationary": diag.stationary}}
    if task.tau > 0.0:
        # velocity shift at time -tau, carried forward to the new origin
        pre = IntegratorConfig(dt=cfg.dt, t_end=task.tau, n_observations=1,
                               min_pair_distance_floor=cfg.min_pair_distance_floor,
                               energy_drift_tolerance=cfg.energy_drift_tolerance,
                               max_halvings=cfg.max_halvings, cell_list=cfg.cell_list)
        res = evolve_pair(z0, zs, params.spec, pre)
        if res.rejected:
            out.update(rejected=True, reason="pre_" + res.reason)
            return out
        z0 = res.base.state(len(res.times) - 1)
        zs = res.shifted.state(len(res.times) - 1)
    L = task.theorem.neighbor_count(n)[0] if n > 1 else None
    obs = make_observers(params.spec, delta_n, L, task.proof_terms)
    res = evolve_pair(z0, zs, params.spec, cfg, obs)
    if res.rejected:
        out.update(rejected=True, reason=res.reason)
        return out
    rec = res.records
    rec["log_term"] = np.log1p(rec["norm1"] / delta_n)
    out.update(rejected=False, records=rec, dt=res.dt,
               shift0=(rec["position_norm"][0], rec["velocity_norm"][0]))
    if task.keep_trajectories:
        out["trajectories"] = (res.base, res.shifted)
    return out


def _map(tasks, workers):
    if workers <= 1:
        return [run_sample(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(run_sample, tasks, chunksize=max(1, len(tasks) // (4 * workers))))


def _mean_se(stack):
    m = stack.shape[0]
    mean = np.mean(stack, axis=0)
    if m < 2:
        return mean, np.full_like(mean, np.nan)
    return mean, np.std(stack, axis=0, ddof=1) / math.sqrt(m)


def estimate_q(params: GibbsParams, shift: ShiftSpec, theorem: TheoremParams,
               cfg: IntegratorConfig, m: int, seed: int, chain: ChainConfig | None = None,
               workers: int = 1, tau: float = 0.0, proof_terms: bool = True,
               keep_trajectories: bool = False):
    """Monte Carlo estimate of Q on the observation grid of ``cfg``.

    Sample k uses streams derived from (seed, k), so the result does not
    depend on ``workers``.  Rejected samples are excluded and counted.
    Returns the curve and the raw per-sample results.
    """
    if m < 2:
        raise ValueError("need at least two samples")
    if not theorem.epsilon_admissible:
        warnings.warn(f"epsilon={theorem.eps} exceeds 1 - alpha/3; growth bound not uniform in N")
    chain = chain or ChainConfig()
    tasks = [SampleTask(k, seed, params, chain, shift, theorem, cfg, tau, proof_terms,
                        keep_trajectories) for k in range(m)]
    results = _map(tasks, workers)
    good = [r for r in results if not r["rejected"]]
    reasons = Counter(r["reason"] for r in results if r["rejected"])
    if not good:
        raise RuntimeError(f"all {m} samples rejected: {dict(reasons)}")
    names = list(good[0]["records"])
    samples = {k: np.stack([r["records"][k] for r in good]) for k in names}
    series = {k: _mean_se(v) for k, v in samples.items()}
    q, se = series["log_term"]
    curve = QCurve(
        times=cfg.times, q=q, stderr=se, m_effective=len(good),
        delta_n=theorem.delta_n(params.n), epsilon=theorem.eps,
        rejected=m - len(good), reasons=dict(reasons), series=series, samples=samples,
        dt_used=[r["dt"] for r in good], chain=[r["chain"] for r in results],
    )
    return curve, results


def proof_term_report(curve: QCurve, theorem: TheoremParams, n: int) -> ProofTermReport:
    L, capped = theorem.neighbor_count(n)
    s = curve.series
    return ProofTermReport(curve.times, *s["s1"], *s["s1_delta"], *s["s2"], L, capped)


# ---------------------------------------------------------------------------
# linear growth


@dataclass
class LinearFit:
    slope: float
    intercept: float
    slope_stderr: float
    slope_ci: tuple[float, float]
    residuals: np.ndarray
    max_positive_residual: float
    sign_pattern: str
    weighted: bool


def _sign_runs(res, tol):
    signs = ["+" if r > tol else "-" if r < -tol else "0" for r in res]
    runs = [s for i, s in enumerate(signs) if i == 0 or s != signs[i - 1]]
    return "".join(runs)


def fit_linear_growth(times, q=None, stderr=None) -> LinearFit:
    """Inverse-variance weighted least-squares line through (t, Q(t)).

    Accepts a :class:`QCurve` or explicit arrays.  Falls back to an
    unweighted fit when any standard error is zero or missing.
    """
    if isinstance(times, QCurve):
        times, q, stderr = times.times, times.q, times.stderr
    t = np.asarray(times, dtype=float)
    y = np.asarray(q, dtype=float)
    if len(t) < 4:
        raise ValueError("need at least 4 time points")
    if np.ptp(t) == 0.0:
        raise ValueError("degenerate time grid")
    se = None if stderr is None else np.asarray(stderr, dtype=float)
    weighted = se is not None and np.all(np.isfinite(se)) and np.all(se > 0.0)
    w = 1.0 / se**2 if weighted else np.ones_like(t)
    X = np.stack([np.ones_like(t), t], axis=1)
    A = X.T @ (w[:, None] * X)
    coef = np.linalg.solve(A, X.T @ (w * y))
    res = y - X @ coef
    if weighted:
        cov = np.linalg.inv(A)
    else:
        dof = max(len(t) - 2, 1)
        cov = np.linalg.inv(A) * float(np.sum(res**2)) / dof
    s_se = math.sqrt(max(cov[1, 1], 0.0))
    scale = max(float(np.max(np.abs(y))), 1.0)
    return LinearFit(
        slope=float(coef[1]),
        intercept=float(coef[0]),
        slope_stderr=s_se,
        slope_ci=(float(coef[1] - 1.96 * s_se), float(coef[1] + 1.96 * s_se)),
        residuals=res,
        max_positive_residual=float(max(np.max(res), 0.0)),
        sign_pattern=_sign_runs(res, 1e-12 * scale),
        weighted=bool(weighted),
    )
