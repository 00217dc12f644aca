"""Experiment runners: Q curves, bound checks, sweeps, and their outputs."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, describe
from .dynamics import PhaseState, write_trajectory_csv
from .gibbs import (GibbsParams, cube_integral, sample_gibbs_chain, sample_positions_mcmc,
                    verify_marginal_bounds, verify_partition_bounds)
from .metrics import QCurve, TheoremParams, estimate_q, fit_linear_growth
from .potential import PotentialSpec, certify_derivative_bounds, potential_value
from .seeding import derive_seed, stream
from .shifts import (EnergySphere, GaussianVelocity, NoShift, beta_prime_gaussian,
                     tilde_mu_closed_form, tilde_mu_quadrature, verify_condition_psi2)

log = logging.getLogger(__name__)


@dataclass
class ResultRecord:
    config_digest: str
    input_digest: str
    kind: str
    status: str = "ok"
    outputs: dict = field(default_factory=dict)
    files: list = field(default_factory=list)
    rejections: dict = field(default_factory=dict)
    wall_clock: float = 0.0
    curve: QCurve | None = field(default=None, repr=False)


# ---------------------------------------------------------------------------
# serialization


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def _stamp(cfg: RunConfig) -> str:
    return f"# config_sha256={cfg.digest()} input_blob={cfg.input_digest()}\n"


def format_curve_csv(cfg: RunConfig, times, est, se, m_eff) -> str:
    buf = io.StringIO()
    buf.write(_stamp(cfg))
    buf.write("t,estimate,stderr,M_effective\n")
    for t, q, s in zip(times, est, se):
        buf.write("%.17g,%.17g,%.17g,%d\n" % (t, q, s, m_eff))
    return buf.getvalue()


def format_series_csv(cfg: RunConfig, curve: QCurve) -> str:
    buf = io.StringIO()
    buf.write(_stamp(cfg))
    buf.write("term,t,estimate,stderr,M_effective\n")
    for name in sorted(curve.series):
        mean, se = curve.series[name]
        for t, q, s in zip(curve.times, mean, se):
            buf.write("%s,%.17g,%.17g,%.17g,%d\n" % (name, t, q, s, curve.m_effective))
    return buf.getvalue()


def write_json(path, cfg: RunConfig, payload: dict):
    doc = {"config_sha256": cfg.digest(), "input_blob": cfg.input_digest(), **payload}
    Path(path).write_text(json.dumps(_jsonable(doc), indent=2, sort_keys=True) + "\n")


def plot_curve(path, cfg: RunConfig, curve: QCurve, fit, title=""):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = cfg.digest()[:16]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.errorbar(curve.times, curve.q, yerr=curve.stderr, fmt="o", ms=3, capsize=2, label="Q(t)")
    if fit is not None:
        ax.plot(curve.times, fit.intercept + fit.slope * curve.times, "-",
                label=f"fit: {fit.intercept:.3g} + {fit.slope:.3g} t")
    ax.set_xlabel("t")
    ax.set_ylabel("Q(t)")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg",
                metadata={"Date": None, "Description": f"config_sha256={cfg.digest()}"})
    plt.close(fig)


# ---------------------------------------------------------------------------
# Q curves


def envelope_check(curve: QCurve, fit) -> dict:
    """Linear-bound shape diagnostics for Q(t) <= Q(0) + B t.

    B is the inverse-variance weighted least-squares slope of Q(t) - Q(0)
    through the origin; the largest positive residual of Q(t) - Q(0) - B t is
    compared with the pooled standard error sqrt(mean(se^2)).  The residual
    of the free-intercept fit and the smallest slope making the line an exact
    upper envelope are reported alongside.
    """
    pooled = float(np.sqrt(np.mean(curve.stderr**2)))
    t = curve.times
    dq = curve.q - curve.q[0]
    later = t > 0
    if not np.any(later):
        raise ValueError("need observation times beyond t = 0")
    se = curve.stderr[later]
    w = 1.0 / se**2 if np.all(se > 0) else np.ones(np.count_nonzero(later))
    slope = float(np.sum(w * t[later] * dq[later]) / np.sum(w * t[later] ** 2))
    res = dq - slope * t
    max_res = float(max(np.max(res), 0.0))
    if pooled > 0:
        ratio = max_res / pooled
        ok = max_res < 3.0 * pooled
    else:
        ratio = 0.0 if max_res == 0.0 else math.inf
        ok = max_res == 0.0
    return {
        "slope": slope,
        "residuals": res,
        "max_positive_residual": max_res,
        "pooled_stderr": pooled,
        "residual_over_pooled": ratio,
        "within_3se": bool(ok),
        "fit_max_positive_residual": fit.max_positive_residual,
        "fit_sign_pattern": fit.sign_pattern,
        "exact_envelope_slope": float(np.max(dq[later] / t[later])),
    }


def _curve_summary(cfg: RunConfig, curve: QCurve, results, theorem: TheoremParams, n, beta,
                   phi_min):
    fit = fit_linear_growth(curve)
    env = envelope_check(curve, fit)
    summary = {
        "theorem": theorem.summary(n, beta, phi_min),
        "fit": {"slope": fit.slope, "intercept": fit.intercept, "slope_stderr": fit.slope_stderr,
                "slope_ci95": fit.slope_ci, "residuals": fit.residuals,
                "max_positive_residual": fit.max_positive_residual,
                "sign_pattern": fit.sign_pattern, "weighted": fit.weighted},
        "envelope": env,
        "q0": float(curve.q[0]),
        "m_effective": curve.m_effective,
        "rejected": curve.rejected,
        "rejection_reasons": curve.reasons,
        "dt_used": sorted(set(curve.dt_used)),
        "chain": {
            "mean_acceptance": float(np.mean([c["acceptance_rate"] for c in curve.chain])),
            "nonstationary_chains": int(sum(not c["stationary"] for c in curve.chain)),
        },
    }
    s = curve.samples
    if "velocity_term" in s:
        summary["velocity_term_max"] = float(np.max(s["velocity_term"]))
    for name in ("s1", "s1_delta", "s2"):
        if name in curve.series:
            summary[f"{name}_time_average"] = float(np.mean(curve.series[name][0]))
    if "overlap" in curve.series:
        summary["overlap_final"] = float(curve.series["overlap"][0][-1])
        summary["overlap_min"] = float(np.min(curve.series["overlap"][0]))
    shift0 = [r["shift0"] for r in results if not r["rejected"]]
    if shift0:
        px = np.array([a for a, _ in shift0])
        pv = np.array([b for _, b in shift0])
        share = np.where(px + pv > 0, px / np.where(px + pv > 0, px + pv, 1.0), 0.0)
        summary["initial_shift"] = {
            "position_norm_mean": float(px.mean()),
            "velocity_norm_mean": float(pv.mean()),
            "position_share_mean": float(share.mean()),
            "position_share_quantiles": np.quantile(share, [0.0, 0.25, 0.5, 0.75, 1.0]),
        }
    return fit, summary


def run_qcurve(cfg: RunConfig, out_dir, workers=1, seed=None, dump_trajectories=False,
               kind="qcurve", tau=None) -> ResultRecord:
    start = time.perf_counter()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    spec = cfg.potential()
    params = cfg.gibbs(spec)
    theorem = cfg.theorem()
    icfg = cfg.integrator()
    seed = cfg.get("monte_carlo", "seed", 0) if seed is None else seed
    tau = cfg.get("monte_carlo", "tau", 0.0) if tau is None else tau
    m = cfg.get("monte_carlo", "samples", 200)
    curve, results = estimate_q(params, cfg.shift(), theorem, icfg, m, seed, cfg.chain(),
                                workers=workers, tau=tau,
                                proof_terms=cfg.get("monte_carlo", "proof_terms", True),
                                keep_trajectories=dump_trajectories)
    fit, summary = _curve_summary(cfg, curve, results, theorem, params.n, params.beta,
                                  spec.phi_min)
    summary.update(kind=kind, seed=seed, tau=tau, parameters=describe(cfg))
    rec = ResultRecord(cfg.digest(), cfg.input_digest(), kind, outputs=summary,
                       rejections={"count": curve.rejected, "reasons": curve.reasons},
                       curve=curve)
    formats = cfg.formats()
    if "csv" in formats:
        p = out / f"{kind}.csv"
        p.write_text(format_curve_csv(cfg, curve.times, curve.q, curve.stderr, curve.m_effective))
        p2 = out / f"{kind}_terms.csv"
        p2.write_text(format_series_csv(cfg, curve))
        rec.files += [str(p), str(p2)]
    if "svg" in formats:
        p = out / f"{kind}.svg"
        plot_curve(p, cfg, curve, fit, title=f"N={params.n}, alpha={spec.alpha}, beta={params.beta}")
        rec.files.append(str(p))
    if dump_trajectories:
        tdir = out / "trajectories"
        tdir.mkdir(exist_ok=True)
        for r in results:
            if "trajectories" in r:
                base, shifted = r["trajectories"]
                for tag, tr in (("base", base), ("shifted", shifted)):
                    p = tdir / f"sample{r['index']:05d}_{tag}.csv"
                    write_trajectory_csv(p, tr, _stamp(cfg))
    rec.wall_clock = time.perf_counter() - start
    if "json" in formats:
        p = out / f"{kind}.json"
        write_json(p, cfg, {**summary, "wall_clock_seconds": rec.wall_clock})
        rec.files.append(str(p))
    return rec


def run_position_shift_recipe(cfg: RunConfig, out_dir, workers=1, seed=None,
                              dump_trajectories=False) -> ResultRecord:
    """Velocity shift applied at t = -tau, both states evolved to 0, Q measured on [0, T].

    tau = 0 reproduces :func:`run_qcurve` exactly.
    """
    tau = cfg.get("monte_carlo", "tau", 0.0)
    if tau < 0:
        raise ConfigError(f"{cfg.where('monte_carlo', 'tau')}: tau must be >= 0")
    if tau > 0:
        steps = tau / cfg.integrator().dt
        if abs(steps - round(steps)) > 1e-9 * max(1.0, steps):
            raise ConfigError(f"{cfg.where('monte_carlo', 'tau')}: tau must be a multiple of dt")
    return run_qcurve(cfg, out_dir, workers, seed, dump_trajectories, kind="position_recipe",
                      tau=tau)


# ---------------------------------------------------------------------------
# checks


def _aggregate(statuses):
    if "fail" in statuses:
        return "fail"
    if "inconclusive" in statuses:
        return "inconclusive"
    return "pass"


def format_histogram_csv(cfg: RunConfig, hist: dict) -> str:
    """Bin centres, density and standard error of a 3-d marginal histogram."""
    dens, se = hist["density"], hist["stderr"]
    b = dens.shape[0]
    centres = hist["lo"] + (np.arange(b) + 0.5) * (hist["hi"] - hist["lo"]) / b
    buf = io.StringIO()
    buf.write(_stamp(cfg))
    buf.write("x,y,z,density,stderr\n")
    for i, j, k in np.ndindex(dens.shape):
        buf.write("%.17g,%.17g,%.17g,%.17g,%.17g\n"
                  % (centres[i], centres[j], centres[k], dens[i, j, k], se[i, j, k]))
    return buf.getvalue()


def check_gibbs(cfg: RunConfig, seed) -> dict:
    spec = cfg.potential()
    params = cfg.gibbs(spec)
    reports = [verify_partition_bounds(GibbsParams(params.beta, 2, spec),
                                       n0=cfg.get("checks", "partition_points", 16))]
    chain = cfg.chain()
    m = cfg.get("checks", "marginal_samples", 20000)
    thin = cfg.get("checks", "marginal_thin_sweeps", 5)
    chain = dataclasses.replace(chain, thin_sweeps=thin)
    samples, diag = sample_positions_mcmc(params, chain, stream(seed, 0, "check-gibbs"), m)
    for k in (1, 2):
        if k == 2 and params.n < 2:
            continue
        reports.append(verify_marginal_bounds(params, k, samples,
                                              bins=cfg.get("checks", "marginal_bins", 8)))
    return {"checks": reports, "chain": diag.to_dict(),
            "status": _aggregate([r["status"] for r in reports])}


def check_shift(cfg: RunConfig, seed) -> dict:
    spec = cfg.potential()
    params = cfg.gibbs(spec)
    shift = cfg.shift()
    reports = []
    if isinstance(shift, NoShift):
        reports.append({"check": "condition_psi", "shift": "none", "K": 1.0, "status": "pass"})
        return {"checks": reports, "status": "pass"}
    count = cfg.get("checks", "shift_states", 200)
    states, diag = sample_gibbs_chain(params, cfg.chain(), stream(seed, 0, "check-shift"), count,
                                      stream(seed, 0, "check-shift-velocities"))
    if isinstance(shift, EnergySphere):
        draws = cfg.get("checks", "energy_sphere_draws", 1000)
        reports.append(verify_condition_psi2(params, shift, states,
                                             stream(seed, 0, "check-shift-draws"),
                                             draws_per_state=max(1, math.ceil(draws / count))))
    else:
        reports.append(verify_condition_psi2(params, shift, states))
    if isinstance(shift, GaussianVelocity):
        # closed form of the shifted density against quadrature at N = 1, C = 0
        free = GibbsParams(params.beta, 1, PotentialSpec.build(spec.alpha, amplitude=0.0))
        rng = stream(seed, 0, "check-shift-quadrature")
        worst = 0.0
        for _ in range(8):
            v = rng.standard_normal(3) * 2.0 / math.sqrt(params.beta)
            z = PhaseState(rng.random((1, 3)), v[None, :])
            a = tilde_mu_closed_form(free, shift, z)
            b = tilde_mu_quadrature(params.beta, shift.sigma, v)
            worst = max(worst, abs(a / b - 1.0))
        reports.append({"check": "closed_form_vs_quadrature", "n": 1, "max_rel_error": worst,
                        "beta_prime_at_n": beta_prime_gaussian(params.beta, shift.sigma, params.n),
                        "status": "pass" if worst < 1e-6 else "fail"})
    return {"checks": reports, "chain": diag.to_dict(),
            "status": _aggregate([r["status"] for r in reports])}


def check_potential(cfg: RunConfig, seed) -> dict:
    spec = cfg.potential()
    bounds = certify_derivative_bounds(spec)
    bounds["status"] = "pass" if bounds["finite"] else "fail"
    bounds["check"] = "derivative_bounds"
    mean = cube_integral(lambda y: potential_value(spec, y), 32)
    zero_mean = {"check": "zero_mean", "cell_average": mean,
                 "status": "pass" if abs(mean) < 1e-6 else "fail"}
    info = {"check": "phi_min", "phi_min": spec.phi_min, "mean_shift": spec.mean_shift,
            "status": "pass" if math.isfinite(spec.phi_min) and spec.phi_min <= 0.0 else "fail"}
    reports = [bounds, zero_mean, info]
    return {"checks": reports, "status": _aggregate([r["status"] for r in reports])}


CHECKS = {"gibbs": check_gibbs, "shift": check_shift, "potential": check_potential}


def run_checks(cfg: RunConfig, which: str, out_dir, seed=None) -> ResultRecord:
    if which not in CHECKS:
        raise ValueError(f"unknown check family '{which}'")
    start = time.perf_counter()
    seed = cfg.get("monte_carlo", "seed", 0) if seed is None else seed
    result = CHECKS[which](cfg, seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for r in result["checks"]:
        hist = r.pop("histogram", None)
        if hist is not None:
            p = out / f"check_{which}_marginal_k{r['k']}.csv"
            p.write_text(format_histogram_csv(cfg, hist))
            files.append(str(p))
    rec = ResultRecord(cfg.digest(), cfg.input_digest(), f"check-{which}", status=result["status"],
                       outputs=result)
    rec.wall_clock = time.perf_counter() - start
    p = out / f"check_{which}.json"
    write_json(p, cfg, {**result, "parameters": describe(cfg), "seed": seed,
                        "wall_clock_seconds": rec.wall_clock})
    rec.files += [str(p), *files]
    return rec


# ---------------------------------------------------------------------------
# sweeps

SWEEP_COLUMNS = ["cell", "params", "B", "fit_slope", "fit_slope_ci_lo", "fit_slope_ci_hi",
                 "fit_intercept", "q0", "max_positive_residual", "pooled_stderr", "within_3se",
                 "exact_envelope_slope", "s2_time_average", "velocity_term_max", "overlap_final",
                 "M_effective", "rejected"]


def sweep(cfg: RunConfig, out_dir, workers=1, seed=None) -> ResultRecord:
    """Run :func:`run_qcurve` for every cell of the [sweep] cross product."""
    if not cfg.sweep:
        raise ConfigError(f"{cfg.source}: sweep needs a [sweep] section")
    start = time.perf_counter()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    master = cfg.get("monte_carlo", "seed", 0) if seed is None else seed
    keys = sorted(cfg.sweep)
    rows = []
    cells = []
    for idx, cell in enumerate(cfg.sweep_cells()):
        label = ",".join(f"{k}={cell.get(*k.split('.', 1))}" for k in keys)
        cell_seed = derive_seed(master, idx, "sweep-cell")
        log.info("sweep cell %d: %s", idx, label)
        rec = run_qcurve(cell, out / f"cell{idx:03d}", workers, cell_seed)
        s = rec.outputs
        env = s["envelope"]
        rows.append([idx, label, env["slope"], s["fit"]["slope"], *s["fit"]["slope_ci95"],
                     s["fit"]["intercept"], s["q0"], env["max_positive_residual"],
                     env["pooled_stderr"], int(env["within_3se"]), env["exact_envelope_slope"],
                     s.get("s2_time_average", float("nan")),
                     s.get("velocity_term_max", float("nan")),
                     s.get("overlap_final", float("nan")), s["m_effective"], s["rejected"]])
        cells.append({"cell": idx, "label": label, "seed": cell_seed, "summary": s})
    col = {name: np.array([r[k] for r in rows], dtype=float)
           for k, name in enumerate(SWEEP_COLUMNS) if k >= 2}

    def ratio(v):
        return float(v.max() / v.min()) if np.all(v > 0) else math.inf

    table = {
        "cells": cells,
        "B_ratio_max_min": ratio(col["B"]),
        "fit_slope_ratio_max_min": ratio(col["fit_slope"]),
        "exact_envelope_slope_ratio_max_min": ratio(col["exact_envelope_slope"]),
        "s2_ratio_max_min": ratio(col["s2_time_average"]),
        "all_within_3se": bool(np.all(col["within_3se"] == 1)),
        "velocity_term_max": float(np.nanmax(col["velocity_term_max"])),
    }
    buf = io.StringIO()
    buf.write(_stamp(cfg))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for r in rows:
        w.writerow([f"{v:.17g}" if isinstance(v, float) else v for v in r])
    (out / "summary.csv").write_text(buf.getvalue())
    rec = ResultRecord(cfg.digest(), cfg.input_digest(), "sweep", outputs=table,
                       files=[str(out / "summary.csv"), str(out / "summary.json")])
    rec.wall_clock = time.perf_counter() - start
    write_json(out / "summary.json", cfg, {**table, "seed": master,
                                           "wall_clock_seconds": rec.wall_clock})
    return rec
