"""Exit-time sampling and exponential-leveling diagnostics.

The quantity of interest is the gap ``|E_x f(Z(tau)) - E_y f(Z(tau))|``
between exit-location functionals started from two safe interior points.
Estimates use common random numbers: each replica pair shares its Wiener
increments, which shrinks the variance of the difference without changing
the estimand.  Exit-time replicas that hit the horizon are censored; the
horizon doubles automatically (up to three times) before a run is flagged.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import PreconditionError
from .geometry import face_tolerance
from .rng import seed_stream
from .simulate import classify_start, step_batch, time_grid


def _map_eps(work, n, threads):
    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(work, range(n)))
    return [work(i) for i in range(n)]

CENSOR_LIMIT = 0.05
MAX_DOUBLINGS = 3


@dataclass
class ExitSample:
    """One realization of (tau, Z(tau)); censored when the horizon hit first."""

    time: float
    point: np.ndarray
    censored: bool


def _check_interior_start(cone, domain, x0):
    x0 = np.asarray(x0, dtype=float)
    if np.min(cone.gaps(x0)) < -face_tolerance(x0):
        raise PreconditionError(f"start {x0} is outside the cone")
    if domain.boundary_distance(x0) <= 0.0:
        raise PreconditionError(f"start {x0} is not inside the domain")
    return x0


def sample_exit(cone, model, domain, x0, dt, horizon, rng, m=None):
    """First exit of one trajectory from ``domain`` (grid + interpolation).

    The crossing time is refined linearly inside the step and the exit
    point snapped onto the boundary.
    """
    if m is None:
        m = cone.normals @ cone.directions.T
    x0 = _check_interior_start(cone, domain, x0)
    k = cone.dimension
    n, widths = time_grid(horizon, dt)
    z = x0[None, :].copy()
    elapsed = 0.0
    for j in range(n):
        dw = rng.standard_normal((1, k)) * np.sqrt(widths[j])
        znew, _ = step_batch(cone, m, model, z, dw, widths[j])
        if float(domain.boundary_distance(znew[0])) <= 0.0:
            s = float(domain.crossing(z, znew)[0])
            point = domain.project_boundary(z[0] + s * (znew[0] - z[0]))
            return ExitSample(time=elapsed + s * widths[j], point=point,
                              censored=False)
        z = znew
        elapsed += widths[j]
    return ExitSample(time=horizon, point=z[0].copy(), censored=True)


@dataclass
class _PairedExits:
    tau_x: np.ndarray
    tau_y: np.ndarray
    exit_x: np.ndarray
    exit_y: np.ndarray
    cens_x: np.ndarray
    cens_y: np.ndarray
    horizon: float

    @property
    def censor_rate(self):
        return float(max(self.cens_x.mean(), self.cens_y.mean()))


def _paired_exit_run(cone, m, model, domain, x, y, n_pairs, dt, horizon, rng,
                     max_doublings=MAX_DOUBLINGS, censor_target=CENSOR_LIMIT):
    """CRN-paired exit sampling from two starts with horizon auto-doubling."""
    k = cone.dimension
    state_x = np.repeat(x[None, :], n_pairs, axis=0)
    state_y = np.repeat(y[None, :], n_pairs, axis=0)
    tau_x = np.zeros(n_pairs)
    tau_y = np.zeros(n_pairs)
    exit_x = np.zeros((n_pairs, k))
    exit_y = np.zeros((n_pairs, k))
    alive_x = np.ones(n_pairs, dtype=bool)
    alive_y = np.ones(n_pairs, dtype=bool)
    sides = ((state_x, alive_x, tau_x, exit_x), (state_y, alive_y, tau_y, exit_y))

    budget, _ = time_grid(horizon, dt)
    sqdt = np.sqrt(dt)
    step_index = 0
    doublings = 0
    while True:
        while step_index < budget:
            act = np.flatnonzero(alive_x | alive_y)
            if act.size == 0:
                break
            dw = rng.standard_normal((act.size, k)) * sqdt
            for state, alive, tau, exit_pt in sides:
                sel = alive[act]
                idx = act[sel]
                if idx.size == 0:
                    continue
                old = state[idx]
                new, _ = step_batch(cone, m, model, old, dw[sel], dt)
                state[idx] = new
                out = domain.boundary_distance(new) <= 0.0
                if out.any():
                    gone = idx[out]
                    s = domain.crossing(old[out], new[out])
                    pts = domain.project_boundary(old[out] + s[:, None] * (new[out] - old[out]))
                    exit_pt[gone] = pts
                    tau[gone] = (step_index + s) * dt
                    alive[gone] = False
            step_index += 1
        censor = max(alive_x.mean(), alive_y.mean())
        if censor < censor_target or doublings >= max_doublings:
            break
        budget *= 2
        doublings += 1
    final_horizon = budget * dt
    for state, alive, tau, exit_pt in sides:
        tau[alive] = final_horizon
        exit_pt[alive] = state[alive]
    return _PairedExits(tau_x=tau_x, tau_y=tau_y, exit_x=exit_x, exit_y=exit_y,
                        cens_x=alive_x, cens_y=alive_y, horizon=final_horizon)


def _certify_start(cone, model, domain, point, t_max, dt, m):
    res = classify_start(cone, model, domain, point, gamma=0.0,
                         t_max=t_max, dt=dt, m=m)
    if res.status != "settled" or res.min_boundary_distance <= 0.0:
        raise PreconditionError(
            f"start {point} not certified in the safe set B0 "
            f"(flow status '{res.status}', min boundary distance "
            f"{res.min_boundary_distance:.3g})")


@dataclass
class GapCurve:
    """Per-eps exit-functional gaps with the log-gap regression.

    ``slope`` is the least-squares slope of log(gap) against 1/eps over the
    eps values whose gap clears 3 standard errors; it is withheld (None)
    whenever any censoring rate reaches 5%.  ``delta1_hat = -slope`` is the
    empirical leveling rate.
    """

    epsilons: np.ndarray
    gaps: np.ndarray
    stderrs: np.ndarray
    censor_rates: np.ndarray
    horizons: np.ndarray
    n_pairs: int
    slope: float | None
    delta1_hat: float | None
    censoring: bool

    def to_dict(self):
        return {
            "epsilon": [float(e) for e in self.epsilons],
            "gap": [float(g) for g in self.gaps],
            "stderr": [float(s) for s in self.stderrs],
            "censor_rate": [float(c) for c in self.censor_rates],
            "horizon": [float(h) for h in self.horizons],
            "n_pairs": self.n_pairs,
            "slope": None if self.slope is None else float(self.slope),
            "delta1_hat": None if self.delta1_hat is None else float(self.delta1_hat),
            "censoring": self.censoring,
        }


def _fit_slope(epsilons, gaps, stderrs, censoring):
    if censoring:
        return None
    eligible = [(1.0 / e, np.log(g)) for e, g, s in zip(epsilons, gaps, stderrs)
                if g > 3.0 * s and g > 0.0]
    if len(eligible) < 2:
        return None
    xs = np.array([p[0] for p in eligible])
    ys = np.array([p[1] for p in eligible])
    return float(np.polyfit(xs, ys, 1)[0])


def leveling_gap(cone, model, domain, f, x, y, eps_grid, replicas, dt, horizon,
                 seed, f_bound=1.0, certify_t_max=None, certify_dt=None,
                 max_doublings=MAX_DOUBLINGS, threads=1, m=None):
    """Estimate ``|E_x f(Z(tau)) - E_y f(Z(tau))|`` across the eps grid.

    Both starts must be certified safe (the zero-noise flow settles without
    leaving the domain); ``f`` is a declared-bounded black box, spot-checked
    against ``f_bound`` on every exit point.  Deterministic given ``seed``.
    """
    if m is None:
        m = cone.normals @ cone.directions.T
    x = _check_interior_start(cone, domain, x)
    y = _check_interior_start(cone, domain, y)
    if certify_t_max is None:
        certify_t_max = max(float(horizon), 100.0)
    if certify_dt is None:
        certify_dt = dt
    base = model.with_eps(0.0)
    _certify_start(cone, base, domain, x, certify_t_max, certify_dt, m)
    _certify_start(cone, base, domain, y, certify_t_max, certify_dt, m)

    eps_grid = np.asarray(eps_grid, dtype=float)

    def work(ei):
        rng = seed_stream(seed, ei)
        run = _paired_exit_run(cone, m, model.with_eps(eps_grid[ei]), domain,
                               x, y, replicas, dt, horizon, rng,
                               max_doublings=max_doublings)
        fx = np.asarray([f(p) for p in run.exit_x], dtype=float)
        fy = np.asarray([f(p) for p in run.exit_y], dtype=float)
        if np.max(np.abs(fx)) > f_bound + 1e-12 or np.max(np.abs(fy)) > f_bound + 1e-12:
            raise PreconditionError("f exceeded its declared bound on an exit point")
        ok_x, ok_y = ~run.cens_x, ~run.cens_y
        gap = abs(fx[ok_x].mean() - fy[ok_y].mean()) if ok_x.any() and ok_y.any() else np.nan
        both = ok_x & ok_y
        if both.sum() >= 2:
            se = float((fx[both] - fy[both]).std(ddof=1) / np.sqrt(both.sum()))
        else:
            se = np.nan
        return gap, se, run.censor_rate, run.horizon

    results = _map_eps(work, len(eps_grid), threads)
    gaps = np.array([r[0] for r in results])
    ses = np.array([r[1] for r in results])
    censors = np.array([r[2] for r in results])
    horizons = [r[3] for r in results]
    censoring = bool(np.any(censors >= CENSOR_LIMIT))
    slope = _fit_slope(eps_grid, gaps, ses, censoring)
    return GapCurve(epsilons=eps_grid, gaps=gaps, stderrs=ses,
                    censor_rates=censors, horizons=np.array(horizons),
                    n_pairs=replicas, slope=slope,
                    delta1_hat=None if slope is None else -slope,
                    censoring=censoring)


@dataclass
class PsiClassCheck:
    ok: bool
    envelope_ratio: float
    increment_ratio: float
    witness: float | None


def psi_class_check(psi, q, m, probe_horizon=1e6, envelope_bound=50.0,
                    increment_bound=50.0, n_grid=400):
    """Probe membership of ``psi`` in the admissible exit-time class.

    Checks, on a log-spaced grid up to ``probe_horizon``, that
    ``|psi(t)| / (1 + log+ t)^q`` and the increment ratio
    ``|psi(t) - psi(s)| / (|t - s|^m + 1)`` stay below the declared bounds.
    Advisory: unboundedness inside the window returns False with a witness.
    """
    if not (0.0 < q < 1.0):
        raise ValueError("q must be in (0, 1)")
    if m < 1.0:
        raise ValueError("m must be >= 1")
    grid = np.concatenate([[0.0], np.logspace(-6, np.log10(probe_horizon), n_grid)])
    vals = np.asarray([float(psi(t)) for t in grid])
    envelope = (1.0 + np.maximum(np.log(np.maximum(grid, 1.0)), 0.0)) ** q
    env_ratio = np.abs(vals) / envelope
    diffs = np.abs(vals[:, None] - vals[None, :])
    seps = np.abs(grid[:, None] - grid[None, :])
    with np.errstate(over="ignore"):
        inc_ratio = diffs / (seps ** m + 1.0)
    worst_env = float(env_ratio.max())
    worst_inc = float(np.nanmax(inc_ratio))
    ok = worst_env <= envelope_bound and worst_inc <= increment_bound
    witness = None if ok else float(grid[int(np.argmax(env_ratio))]
                                    if worst_env > envelope_bound
                                    else grid[int(np.unravel_index(np.argmax(inc_ratio), inc_ratio.shape)[0])])
    return PsiClassCheck(ok=ok, envelope_ratio=worst_env,
                         increment_ratio=worst_inc, witness=witness)


@dataclass
class PsiGapCurve:
    """Per-eps gaps of exit-time functionals with the boundedness verdict.

    PASS means no gap grows beyond twice the largest gap seen at the two
    largest eps values (an operational stand-in for a finite limsup).
    """

    epsilons: np.ndarray
    gaps: np.ndarray
    stderrs: np.ndarray
    censor_rates: np.ndarray
    horizons: np.ndarray
    n_pairs: int
    verdict: str
    censoring: bool

    def to_dict(self):
        return {
            "epsilon": [float(e) for e in self.epsilons],
            "gap": [float(g) for g in self.gaps],
            "stderr": [float(s) for s in self.stderrs],
            "censor_rate": [float(c) for c in self.censor_rates],
            "horizon": [float(h) for h in self.horizons],
            "n_pairs": self.n_pairs,
            "verdict": self.verdict,
            "censoring": self.censoring,
        }


def psi_gap(cone, model, domain, psi, q, m_exponent, x, y, eps_grid, replicas,
            dt, horizon, seed, certify_t_max=None, certify_dt=None,
            max_doublings=MAX_DOUBLINGS, threads=1, m=None):
    """Estimate ``|E_x psi(tau) - E_y psi(tau)|`` across the eps grid.

    ``psi`` must pass :func:`psi_class_check` for the declared (q, m).
    Censored replicas are excluded from the estimator (their psi value
    would be biased); a censoring rate at or above 5% makes the verdict
    INCONCLUSIVE.
    """
    check = psi_class_check(psi, q, m_exponent)
    if not check.ok:
        raise PreconditionError(
            f"psi failed the class probe (worst envelope ratio "
            f"{check.envelope_ratio:.3g} at t = {check.witness})")
    if m is None:
        m = cone.normals @ cone.directions.T
    x = _check_interior_start(cone, domain, x)
    y = _check_interior_start(cone, domain, y)
    if certify_t_max is None:
        certify_t_max = max(float(horizon), 100.0)
    if certify_dt is None:
        certify_dt = dt
    base = model.with_eps(0.0)
    _certify_start(cone, base, domain, x, certify_t_max, certify_dt, m)
    _certify_start(cone, base, domain, y, certify_t_max, certify_dt, m)

    eps_grid = np.asarray(eps_grid, dtype=float)

    def work(ei):
        rng = seed_stream(seed, ei)
        run = _paired_exit_run(cone, m, model.with_eps(eps_grid[ei]), domain,
                               x, y, replicas, dt, horizon, rng,
                               max_doublings=max_doublings)
        px = np.asarray([psi(t) for t in run.tau_x], dtype=float)
        py = np.asarray([psi(t) for t in run.tau_y], dtype=float)
        ok_x, ok_y = ~run.cens_x, ~run.cens_y
        gap = abs(px[ok_x].mean() - py[ok_y].mean()) if ok_x.any() and ok_y.any() else np.nan
        both = ok_x & ok_y
        se = float((px[both] - py[both]).std(ddof=1) / np.sqrt(both.sum())) \
            if both.sum() >= 2 else np.nan
        return gap, se, run.censor_rate, run.horizon

    results = _map_eps(work, len(eps_grid), threads)
    gaps = np.array([r[0] for r in results])
    ses = [r[1] for r in results]
    censors = np.array([r[2] for r in results])
    horizons = [r[3] for r in results]
    censoring = bool(np.any(censors >= CENSOR_LIMIT))
    order = np.argsort(eps_grid)[::-1]
    ref = float(np.max(gaps[order[:2]])) if len(order) >= 2 else float(gaps[order[0]])
    if censoring or np.any(np.isnan(gaps)):
        verdict = "INCONCLUSIVE"
    else:
        verdict = "PASS" if np.all(gaps <= 2.0 * max(ref, 1e-300)) else "FAIL"
    return PsiGapCurve(epsilons=eps_grid, gaps=gaps, stderrs=np.array(ses),
                       censor_rates=censors, horizons=np.array(horizons),
                       n_pairs=replicas, verdict=verdict, censoring=censoring)
