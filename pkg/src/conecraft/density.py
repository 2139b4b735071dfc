"""Monte Carlo floors for (possibly killed) rescaled transition densities.

All estimates work in the O(1) rescaled coordinates: the law of
``Z^eps(t) = eps^-2 Z(eps^2 t)`` has density ``eps^{2k} p_eps(eps^2 t,
eps^2 x, eps^2 y)``, so a uniform-in-eps histogram floor here is exactly a
minorization floor for the original small-noise process.  Bin-averaged
lower bounds are the natural estimator for an almost-everywhere statement;
bins only partially covered by the target set are excluded so rim averages
cannot understate the interior density.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import GeometryError, IncompatibleGeometry, PreconditionError
from .rng import seed_stream
from .simulate import drift_at, noise_at, scaled_model, terminal_batch, time_grid


def _run_units(work, units, threads):
    """Run independent work units, merging results in submission order."""
    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(work, units))
    return [work(u) for u in units]

Z99 = 2.5758293035489004   # two-sided 99% normal quantile
MIN_VALID_COUNT = 5        # below this the normal/Wilson approximation is off
_DEFAULT_BATCH = 25_000
_MAX_BATCHES = 1 << 12


def wilson_lower(count, n, z=Z99):
    """Wilson score lower confidence bound for a binomial proportion."""
    if n <= 0:
        raise ValueError("n must be positive")
    p = count / n
    denom = 1.0 + z * z / n
    center = p + z * z / (2.0 * n)
    rad = z * np.sqrt(p * (1.0 - p) / n + z * z / (4.0 * n * n))
    return max(0.0, (center - rad) / denom)


@dataclass
class HistogramGrid:
    """Axis-aligned histogram of terminal points in rescaled coordinates."""

    lo: np.ndarray
    hi: np.ndarray
    bins: np.ndarray          # bins per axis
    counts: np.ndarray        # integer counts, shape = bins
    replicas: int

    @property
    def bin_volume(self):
        return float(np.prod((self.hi - self.lo) / self.bins))

    @property
    def outside_fraction(self):
        return 1.0 - int(self.counts.sum()) / self.replicas

    def density(self):
        return self.counts / (self.replicas * self.bin_volume)

    def edges(self):
        return [np.linspace(self.lo[i], self.hi[i], self.bins[i] + 1)
                for i in range(len(self.lo))]

    def centers(self):
        return [0.5 * (e[:-1] + e[1:]) for e in self.edges()]

    def bins_inside_ball(self, center, radius):
        """Mask of bins whose farthest corner stays inside the ball."""
        center = np.asarray(center, dtype=float)
        worst = []
        for i, e in enumerate(self.edges()):
            lo_d = np.abs(e[:-1] - center[i])
            hi_d = np.abs(e[1:] - center[i])
            worst.append(np.maximum(lo_d, hi_d))
        grids = np.meshgrid(*worst, indexing="ij")
        dist2 = sum(g * g for g in grids)
        return dist2 <= radius * radius

    def density_at(self, point):
        """Density estimate of the bin containing ``point`` (nan outside)."""
        point = np.asarray(point, dtype=float)
        idx = []
        for i, e in enumerate(self.edges()):
            j = int(np.searchsorted(e, point[i], side="right")) - 1
            if j < 0 or j >= self.bins[i]:
                return float("nan")
            idx.append(j)
        return float(self.density()[tuple(idx)])


def ball_box(center, radius):
    """Bounding box of a ball, for histogram construction."""
    center = np.asarray(center, dtype=float)
    return center - radius, center + radius


def terminal_histogram(cone, model, x_bar, t, dt, replicas, lo, hi, bins,
                       seed, stream_base=0, batch_size=_DEFAULT_BATCH, m=None):
    """Histogram of the rescaled process at time ``t`` from one start.

    Replicas run in fixed-size batches, each on its own counter-based
    stream, so the result is reproducible and batch-mergeable.
    """
    if replicas < 1:
        raise PreconditionError("replicas must be >= 1")
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    k = cone.dimension
    bins = np.full(k, bins, dtype=int) if np.isscalar(bins) else np.asarray(bins, dtype=int)
    counts = np.zeros(bins, dtype=np.int64)
    smodel = scaled_model(model)
    done = 0
    batch_index = 0
    x_bar = np.atleast_2d(np.asarray(x_bar, dtype=float))
    while done < replicas:
        nb = min(batch_size, replicas - done)
        rng = seed_stream(seed, stream_base + batch_index)
        z, _ = terminal_batch(cone, smodel, np.repeat(x_bar, nb, axis=0),
                              t, dt, rng, m=m)
        h, _ = np.histogramdd(z, bins=bins, range=list(zip(lo, hi)))
        counts += h.astype(np.int64)
        done += nb
        batch_index += 1
    return HistogramGrid(lo=lo, hi=hi, bins=bins, counts=counts, replicas=replicas)


@dataclass
class FloorRow:
    """Floor data for one (eps, start) pair."""

    eps: float
    start: np.ndarray
    floor: float
    lcb: float
    se: float
    min_count: int
    outside_fraction: float
    stage1: float = float("nan")


@dataclass
class FloorReport:
    """Uniform-in-eps density floor over a target set, with 99% bounds.

    ``verdict`` is PASS when every per-eps lower confidence bound is
    positive (then ``kappa_min`` is a common floor for the whole grid) and
    the argmin bins carry enough mass for the bound to be meaningful;
    otherwise INCONCLUSIVE.  A Monte Carlo run can never certify a zero
    density, so there is no FAIL.
    """

    epsilons: np.ndarray
    floors: np.ndarray
    lcbs: np.ndarray
    ses: np.ndarray
    min_counts: np.ndarray
    verdict: str
    kappa_min: float
    target: dict
    starts: np.ndarray
    rows: list
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "epsilon": [float(e) for e in self.epsilons],
            "floor": [float(f) for f in self.floors],
            "lcb99": [float(b) for b in self.lcbs],
            "stderr": [float(s) for s in self.ses],
            "min_count": [int(c) for c in self.min_counts],
            "verdict": self.verdict,
            "kappa_min": float(self.kappa_min),
            "geometry": self.target,
            "starts": np.asarray(self.starts, dtype=float).tolist(),
            **{key: val for key, val in self.extra.items()},
        }


def _verdict(lcbs, min_counts):
    lcbs = np.asarray(lcbs, dtype=float)
    valid = np.all(np.asarray(min_counts) >= MIN_VALID_COUNT) and np.all(lcbs > 0.0)
    kappa = float(np.min(lcbs))
    return ("PASS" if (valid and kappa > 0.0) else "INCONCLUSIVE"), kappa


def _floor_se(count, n, volume):
    p = max(int(count), 1) / n
    return float(np.sqrt(p * (1.0 - p) / n) / volume)


@dataclass(frozen=True)
class MinorizationGeometry:
    """Radii and time split for the minorization experiment.

    Requires ``x0`` interior with ``|x0| < M1``, the ``r2`` ball inside the
    cone interior and inside ``{|x| < M1}``, radii ``r0 < r1 < r2``, and a
    split ``t2 + t3 = t1`` of the probe time.
    """

    x0: np.ndarray
    r0: float
    r1: float
    r2: float
    big_m: float
    m1: float
    t1: float
    t2: float

    def __post_init__(self):
        object.__setattr__(self, "x0", np.asarray(self.x0, dtype=float))

    @property
    def t3(self):
        return self.t1 - self.t2

    def validate(self, cone):
        x0 = self.x0
        if not (0.0 < self.r0 < self.r1 < self.r2):
            raise GeometryError(
                f"radii must satisfy 0 < r0 < r1 < r2, got ({self.r0}, {self.r1}, {self.r2})")
        if not (0.0 < self.m1 < self.big_m):
            raise GeometryError(f"need 0 < M1 < M, got M1={self.m1}, M={self.big_m}")
        if np.linalg.norm(x0) >= self.m1:
            raise GeometryError(f"|x0| = {np.linalg.norm(x0):.6g} must be < M1 = {self.m1}")
        if np.linalg.norm(x0) + self.r2 >= self.m1:
            raise GeometryError(
                f"ball of radius r2 around x0 leaves |x| < M1 "
                f"({np.linalg.norm(x0):.6g} + {self.r2} >= {self.m1})")
        if np.min(cone.gaps(x0)) <= self.r2:
            raise GeometryError("ball of radius r2 around x0 leaves the cone interior")
        if not (0.0 < self.t2 < self.t1):
            raise GeometryError("need 0 < t2 < t1")

    def bump(self, z):
        """Radial profile: 1 on the r0 ball, 0 off the r1 ball, linear between."""
        d = np.linalg.norm(np.asarray(z, dtype=float) - self.x0, axis=-1)
        return np.clip((self.r1 - d) / (self.r1 - self.r0), 0.0, 1.0)

    def describe(self):
        return {"x0": self.x0.tolist(), "r0": self.r0, "r1": self.r1,
                "r2": self.r2, "M": self.big_m, "M1": self.m1,
                "t1": self.t1, "t2": self.t2, "t3": self.t3}


def default_start_grid(cone, big_m, per_axis=9):
    """Lattice over the box of B_M, kept to the ball and the cone."""
    k = cone.dimension
    axes = [np.linspace(-big_m, big_m, per_axis)] * k
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, k)
    keep = (np.linalg.norm(grid, axis=1) <= big_m) & cone.contains(grid)
    return grid[keep]


def minorization_check(cone, model, geom, eps_grid, replicas, dt, seed,
                       start_grid=None, bins=3, e_radius="r0",
                       batch_size=_DEFAULT_BATCH, threads=1, m=None):
    """Uniform floor of the rescaled transition density over the target set.

    For each eps and each rescaled start in B_M, runs replicas to time
    ``t1``, histograms the terminal points over the target ball around
    ``x0`` (radius ``r0`` by default, ``r1`` optionally) and takes the
    worst bin.  The time-``t2`` snapshot of the same runs yields the
    stage-one mass estimate (the bump-profile expectation), reported as the
    ``kappa0`` diagnostic of the two-stage decomposition.
    """
    geom.validate(cone)
    eps_grid = np.asarray(eps_grid, dtype=float)
    if np.any(eps_grid <= 0.0):
        raise GeometryError("eps grid must be positive")
    if start_grid is None:
        start_grid = default_start_grid(cone, geom.big_m)
    start_grid = np.atleast_2d(np.asarray(start_grid, dtype=float))
    if start_grid.shape[0] == 0:
        raise GeometryError("start grid is empty")
    if np.any(np.linalg.norm(start_grid, axis=1) > geom.big_m * (1 + 1e-12)):
        raise GeometryError("start grid must lie in the ball of radius M")
    if not np.all(cone.contains(start_grid)):
        raise GeometryError("start grid must lie in the cone")
    radius = {"r0": geom.r0, "r1": geom.r1}[e_radius]
    lo, hi = ball_box(geom.x0, radius)
    k = cone.dimension
    bins_arr = np.full(k, bins, dtype=int)
    if m is None:
        m = cone.normals @ cone.directions.T

    def work(unit):
        ei, si = unit
        eps, start = eps_grid[ei], start_grid[si]
        emodel = scaled_model(model.with_eps(eps))
        base = (ei * start_grid.shape[0] + si) * _MAX_BATCHES
        counts = np.zeros(bins_arr, dtype=np.int64)
        s1_sum, s1_sq = 0.0, 0.0
        done, batch_index = 0, 0
        while done < replicas:
            nb = min(batch_size, replicas - done)
            rng = seed_stream(seed, base + batch_index)
            x0b = np.repeat(start[None, :], nb, axis=0)
            z, snaps = terminal_batch(cone, emodel, x0b, geom.t1, dt, rng,
                                      capture_times=(geom.t2,), m=m)
            h, _ = np.histogramdd(z, bins=bins_arr, range=list(zip(lo, hi)))
            counts += h.astype(np.int64)
            vals = geom.bump(snaps[0])
            s1_sum += float(vals.sum())
            s1_sq += float((vals * vals).sum())
            done += nb
            batch_index += 1
        hist = HistogramGrid(lo=lo, hi=hi, bins=bins_arr, counts=counts,
                             replicas=replicas)
        mask = hist.bins_inside_ball(geom.x0, radius)
        if not mask.any():
            raise GeometryError(
                "no histogram bin fits inside the target ball; increase bins")
        vol = hist.bin_volume
        cmin = int(counts[mask].min())
        k0 = s1_sum / replicas
        k0_var = max(s1_sq / replicas - k0 * k0, 0.0)
        k0_lcb = max(0.0, k0 - Z99 * np.sqrt(k0_var / replicas))
        row = FloorRow(eps=float(eps), start=start,
                       floor=cmin / (replicas * vol),
                       lcb=wilson_lower(cmin, replicas) / vol,
                       se=_floor_se(cmin, replicas, vol), min_count=cmin,
                       outside_fraction=hist.outside_fraction, stage1=k0)
        return row, k0_lcb

    units = [(ei, si) for ei in range(len(eps_grid))
             for si in range(start_grid.shape[0])]
    results = _run_units(work, units, threads)

    rows = [r for r, _ in results]
    floors, lcbs, ses, min_counts, kappa0s, kappa0_lcbs = [], [], [], [], [], []
    n_starts = start_grid.shape[0]
    for ei in range(len(eps_grid)):
        chunk = results[ei * n_starts:(ei + 1) * n_starts]
        worst = min(chunk, key=lambda rc: rc[0].floor)[0]
        floors.append(worst.floor)
        ses.append(worst.se)
        min_counts.append(worst.min_count)
        lcbs.append(min(rc[0].lcb for rc in chunk))
        k0_worst = min(chunk, key=lambda rc: rc[0].stage1)
        kappa0s.append(k0_worst[0].stage1)
        kappa0_lcbs.append(k0_worst[1])

    verdict, kappa = _verdict(lcbs, min_counts)
    target = {"shape": "ball", "center": geom.x0.tolist(), "radius": radius,
              "e_radius": e_radius, **geom.describe()}
    return FloorReport(
        epsilons=eps_grid, floors=np.array(floors), lcbs=np.array(lcbs),
        ses=np.array(ses), min_counts=np.array(min_counts), verdict=verdict,
        kappa_min=kappa, target=target, starts=start_grid, rows=rows,
        extra={"kappa0": [float(v) for v in kappa0s],
               "kappa0_lcb99": [float(v) for v in kappa0_lcbs]})


def _killed_batch(model_eps, x0, center, radius, horizon, dt, rng):
    """Unconstrained Euler run killed at the first grid exit from the ball."""
    x0 = np.atleast_2d(x0)
    nb, k = x0.shape
    n, widths = time_grid(horizon, dt)
    z = x0.copy()
    alive = np.ones(nb, dtype=bool)
    for j in range(n):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        dw = rng.standard_normal((idx.size, k)) * np.sqrt(widths[j])
        zi = z[idx]
        zi = zi + drift_at(model_eps, zi) * widths[j] + model_eps.eps * noise_at(model_eps, zi, dw)
        z[idx] = zi
        out = np.linalg.norm(zi - center, axis=1) > radius
        alive[idx[out]] = False
    return z, alive


def killed_start_grid(center, radius, per_axis=3):
    """Lattice over the inscribed box of the target ball (all points inside)."""
    center = np.asarray(center, dtype=float)
    k = center.shape[0]
    half = radius / np.sqrt(k) * 0.999
    axes = [np.linspace(c - half, c + half, per_axis) for c in center]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, k)


def killed_kernel_floor(model, center, radius, gamma, t, eps_grid, replicas,
                        dt, seed, start_grid=None, bins=5,
                        batch_size=_DEFAULT_BATCH, threads=1):
    """Floor of the Dirichlet (killed) kernel of the rescaled generator.

    Runs the unconstrained Euler scheme with coefficients ``b(eps^2 .)``,
    ``sigma(eps^2 .)``, kills paths on their first grid exit from
    ``B(center, radius)``, and histograms the survivors at time ``t`` over
    the concentric ``gamma * radius`` ball.
    """
    if not (0.0 < gamma < 1.0):
        raise GeometryError(f"gamma must be in (0, 1), got {gamma}")
    if replicas < 1:
        raise PreconditionError("replicas must be >= 1")
    center = np.asarray(center, dtype=float)
    k = center.shape[0]
    target_radius = gamma * radius
    if start_grid is None:
        start_grid = killed_start_grid(center, target_radius)
    start_grid = np.atleast_2d(np.asarray(start_grid, dtype=float))
    if np.any(np.linalg.norm(start_grid - center, axis=1) > target_radius):
        raise GeometryError("starts must lie in the gamma * radius ball")
    eps_grid = np.asarray(eps_grid, dtype=float)
    lo, hi = ball_box(center, target_radius)
    bins_arr = np.full(k, bins, dtype=int)

    def work(unit):
        ei, si = unit
        eps, start = eps_grid[ei], start_grid[si]
        emodel = scaled_model(model.with_eps(eps))
        base = (ei * start_grid.shape[0] + si) * _MAX_BATCHES
        counts = np.zeros(bins_arr, dtype=np.int64)
        n_alive = 0
        done, batch_index = 0, 0
        while done < replicas:
            nb = min(batch_size, replicas - done)
            rng = seed_stream(seed, base + batch_index)
            x0b = np.repeat(start[None, :], nb, axis=0)
            z, alive = _killed_batch(emodel, x0b, center, radius, t, dt, rng)
            h, _ = np.histogramdd(z[alive], bins=bins_arr, range=list(zip(lo, hi)))
            counts += h.astype(np.int64)
            n_alive += int(alive.sum())
            done += nb
            batch_index += 1
        hist = HistogramGrid(lo=lo, hi=hi, bins=bins_arr, counts=counts,
                             replicas=replicas)
        mask = hist.bins_inside_ball(center, target_radius)
        if not mask.any():
            raise GeometryError(
                "no histogram bin fits inside the target ball; increase bins")
        vol = hist.bin_volume
        cmin = int(counts[mask].min())
        row = FloorRow(eps=float(eps), start=start,
                       floor=cmin / (replicas * vol),
                       lcb=wilson_lower(cmin, replicas) / vol,
                       se=_floor_se(cmin, replicas, vol), min_count=cmin,
                       outside_fraction=hist.outside_fraction)
        return row, n_alive / replicas

    units = [(ei, si) for ei in range(len(eps_grid))
             for si in range(start_grid.shape[0])]
    results = _run_units(work, units, threads)

    rows = [r for r, _ in results]
    floors, lcbs, ses, min_counts, survival = [], [], [], [], []
    n_starts = start_grid.shape[0]
    for ei in range(len(eps_grid)):
        chunk = results[ei * n_starts:(ei + 1) * n_starts]
        worst = min(chunk, key=lambda rc: rc[0].floor)[0]
        floors.append(worst.floor)
        ses.append(worst.se)
        min_counts.append(worst.min_count)
        lcbs.append(min(rc[0].lcb for rc in chunk))
        survival.append(min(rc[1] for rc in chunk))

    verdict, kappa = _verdict(lcbs, min_counts)
    target = {"shape": "killed_ball", "center": center.tolist(),
              "radius": float(radius), "gamma": float(gamma),
              "target_radius": float(target_radius), "t": float(t)}
    return FloorReport(
        epsilons=eps_grid, floors=np.array(floors), lcbs=np.array(lcbs),
        ses=np.array(ses), min_counts=np.array(min_counts), verdict=verdict,
        kappa_min=kappa, target=target, starts=start_grid, rows=rows,
        extra={"min_survival": [float(s) for s in survival]})


@dataclass
class ComposedFloor:
    """Product floor ``kappa = kappa1 * kappa0`` of the two-stage chain."""

    epsilons: np.ndarray
    kappas: np.ndarray
    lcbs: np.ndarray
    verdict: str

    def to_dict(self):
        return {"epsilon": [float(e) for e in self.epsilons],
                "kappa": [float(v) for v in self.kappas],
                "lcb99": [float(v) for v in self.lcbs],
                "verdict": self.verdict}


def chapman_floor_compose(stage1_report, stage2_report):
    """Compose the stage-one mass bound with the killed-kernel floor.

    ``stage1_report`` is a minorization FloorReport (its ``kappa0``
    diagnostic is the stage-one bound); ``stage2_report`` is a killed-kernel
    FloorReport whose target ball must coincide with the stage-one ``r1``
    ball inside the ``r2`` ball, on the same eps grid.
    """
    geo1 = stage1_report.target
    geo2 = stage2_report.target
    if geo2.get("shape") != "killed_ball" or "kappa0" not in stage1_report.extra:
        raise IncompatibleGeometry("expected a minorization report and a killed-kernel report")
    x0 = np.asarray(geo1["x0"], dtype=float)
    if (np.linalg.norm(np.asarray(geo2["center"]) - x0) > 1e-12
            or abs(geo2["target_radius"] - geo1["r1"]) > 1e-12
            or abs(geo2["radius"] - geo1["r2"]) > 1e-12):
        raise IncompatibleGeometry(
            "stage-two kernel must act on the r2 ball with targets in the r1 ball")
    e1 = np.asarray(stage1_report.epsilons, dtype=float)
    e2 = np.asarray(stage2_report.epsilons, dtype=float)
    if e1.shape != e2.shape or np.any(np.abs(e1 - e2) > 1e-12):
        raise IncompatibleGeometry("eps grids differ between the stages")
    kappa0 = np.asarray(stage1_report.extra["kappa0"], dtype=float)
    kappa0_lcb = np.asarray(stage1_report.extra["kappa0_lcb99"], dtype=float)
    # the r1-ball mass dominates the bump expectation only through phi <= 1,
    # so the product of the two lower bounds stays a valid lower bound
    kappas = kappa0 * stage2_report.floors
    lcbs = kappa0_lcb * stage2_report.lcbs
    both_pass = (stage2_report.verdict == "PASS"
                 and np.all(kappa0_lcb > 0.0)
                 and np.all(np.asarray(stage1_report.min_counts) >= 0))
    verdict = "PASS" if (both_pass and np.all(lcbs > 0.0)) else "INCONCLUSIVE"
    return ComposedFloor(epsilons=e1, kappas=kappas, lcbs=lcbs, verdict=verdict)
