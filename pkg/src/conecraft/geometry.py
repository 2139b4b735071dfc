"""Polyhedral cones with oblique reflection data and static geometric checks.

The state space is ``G = { x : <x, n_i> >= 0 for all i }``, the intersection
of half-spaces through the origin with unit inward normals ``n_i``.  Each face
carries a unit constraint direction ``d_i`` with ``<d_i, n_i> > 0``.  The
drift-stability cone is ``C = cone{-d_1, ..., -d_N}``; margins inside it
control attraction of the constrained dynamics to the vertex.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import nnls

from .errors import DimensionLimit, OutsideCone, ConeValidationError

UNIT_TOL = 1e-12
FACET_ENUM_LIMIT = 6
_FACET_TOL = 1e-10


def face_tolerance(x):
    """Relative band used to decide whether a face is active at ``x``."""
    x = np.asarray(x, dtype=float)
    return 1e-9 * (1.0 + np.linalg.norm(x, axis=-1))


@dataclass(frozen=True, eq=False)
class PolyhedralCone:
    """Reflection data ``{(n_i, d_i)}`` for a polyhedral cone in R^k.

    Immutable after construction; safe to share across workers.
    """

    normals: np.ndarray      # (N, k) unit inward normals
    directions: np.ndarray   # (N, k) unit constraint directions

    def __post_init__(self):
        normals = np.atleast_2d(np.asarray(self.normals, dtype=float))
        directions = np.atleast_2d(np.asarray(self.directions, dtype=float))
        if normals.shape != directions.shape:
            raise ValueError("normals and directions must have equal shapes")
        if normals.ndim != 2 or normals.shape[0] < 1 or normals.shape[1] < 1:
            raise ValueError("need at least one face in dimension >= 1")
        normals.setflags(write=False)
        directions.setflags(write=False)
        object.__setattr__(self, "normals", normals)
        object.__setattr__(self, "directions", directions)

    @property
    def dimension(self):
        return self.normals.shape[1]

    @property
    def n_faces(self):
        return self.normals.shape[0]

    def gaps(self, x):
        """Inner products ``<x, n_i>`` for a point or batch of points."""
        return np.asarray(x, dtype=float) @ self.normals.T

    def contains(self, x, tol=None):
        g = self.gaps(x)
        if tol is None:
            tol = face_tolerance(x)
        return np.min(g, axis=-1) >= -tol


def orthant(k):
    """Nonnegative orthant in R^k with normal reflection."""
    eye = np.eye(k)
    return PolyhedralCone(eye, eye)


def halfline():
    """The half-line [0, inf) with unit reflection."""
    return PolyhedralCone(np.ones((1, 1)), np.ones((1, 1)))


def skewed_orthant_2d(d2=(1.0, 1.0)):
    """2-D orthant with an oblique direction on the second face."""
    d2 = np.asarray(d2, dtype=float)
    d2 = d2 / np.linalg.norm(d2)
    return PolyhedralCone(np.eye(2), np.array([[1.0, 0.0], d2]))


@dataclass
class CheckResult:
    name: str
    passed: bool
    margin: float
    detail: str = ""


@dataclass
class ValidationReport:
    checks: list
    interior_point: np.ndarray | None = None
    spectral_summary: dict = field(default_factory=dict)

    @property
    def passed(self):
        return all(c.passed for c in self.checks)

    def failures(self):
        return [c for c in self.checks if not c.passed]

    def raise_if_failed(self):
        bad = self.failures()
        if bad:
            names = "; ".join(f"{c.name} (margin {c.margin:.3g})" for c in bad)
            raise ConeValidationError(f"cone validation failed: {names}", report=self)


def _interior_certificate(cone, restarts=100, iters=200, seed=0):
    """Maximize min_i <x, n_i> over the unit ball by subgradient ascent.

    Random restarts plus deterministic candidates (each normal and their
    mean); good enough at desk scale, no solver dependency.
    """
    rng = np.random.default_rng(seed)
    nmat = cone.normals
    k = cone.dimension

    def score(x):
        return float(np.min(nmat @ x))

    candidates = [nmat.mean(axis=0)] + [n.copy() for n in nmat]
    best_x, best = None, -np.inf
    for cand in candidates:
        nrm = np.linalg.norm(cand)
        if nrm > 0:
            cand = cand / nrm
            s = score(cand)
            if s > best:
                best_x, best = cand, s
    for _ in range(restarts):
        x = rng.standard_normal(k)
        x /= np.linalg.norm(x)
        for it in range(iters):
            g = nmat @ x
            i = int(np.argmin(g))
            x = x + (0.5 / np.sqrt(1.0 + it)) * nmat[i]
            nrm = np.linalg.norm(x)
            if nrm > 1.0:
                x /= nrm
        s = score(x)
        if s > best:
            best_x, best = x, s
    return best_x, best


def validate_cone(cone, seed=0):
    """Run all static checks on the reflection data.

    Returns a :class:`ValidationReport`; call ``raise_if_failed`` for the
    structured-rejection behaviour.  Checks: unit norms of every ``n_i`` and
    ``d_i``, the strict obliqueness margins ``<d_i, n_i> > 0``, a certified
    interior point of G, and a spectral summary of the reflection matrix
    ``M_ij = <n_i, d_j>``.
    """
    checks = []
    for i in range(cone.n_faces):
        dev_n = abs(np.linalg.norm(cone.normals[i]) - 1.0)
        checks.append(CheckResult(
            name=f"unit_normal[{i + 1}]", passed=dev_n <= UNIT_TOL, margin=dev_n,
            detail=f"| |n_{i + 1}| - 1 | = {dev_n:.3g}"))
        dev_d = abs(np.linalg.norm(cone.directions[i]) - 1.0)
        checks.append(CheckResult(
            name=f"unit_direction[{i + 1}]", passed=dev_d <= UNIT_TOL, margin=dev_d,
            detail=f"| |d_{i + 1}| - 1 | = {dev_d:.3g}"))
        dn = float(cone.directions[i] @ cone.normals[i])
        checks.append(CheckResult(
            name=f"oblique_margin[{i + 1}]", passed=dn > 0.0, margin=dn,
            detail=f"<d_{i + 1}, n_{i + 1}> = {dn:.6g}"))

    x_star, margin = _interior_certificate(cone, seed=seed)
    checks.append(CheckResult(
        name="interior_point", passed=margin > 0.0, margin=margin,
        detail=f"min_i <x*, n_i> = {margin:.6g}"))

    m = cone.normals @ cone.directions.T
    eig = np.linalg.eigvals(m)
    summary = {
        "min_diagonal": float(np.min(np.diag(m))),
        "spectral_radius": float(np.max(np.abs(eig))),
        "min_real_eigenvalue": float(np.min(eig.real)),
    }
    return ValidationReport(checks=checks, interior_point=x_star,
                            spectral_summary=summary)


@dataclass
class FaceActivity:
    """Active-face set at a point: indices i with |<x, n_i>| <= tolerance."""

    point: np.ndarray
    active: tuple          # 1-based face indices
    tolerance: float

    @property
    def is_interior(self):
        return len(self.active) == 0


def active_faces(cone, x, tol=None):
    """Faces within ``tol`` of zero gap at ``x``; raises if x is outside G."""
    x = np.asarray(x, dtype=float)
    if tol is None:
        tol = float(face_tolerance(x))
    g = cone.gaps(x)
    if np.min(g) < -tol:
        raise OutsideCone(
            f"point outside cone: min_i <x, n_i> = {np.min(g):.3g} < {-tol:.3g}")
    idx = tuple(int(i) + 1 for i in np.flatnonzero(np.abs(g) <= tol))
    return FaceActivity(point=x, active=idx, tolerance=tol)


@dataclass
class StabilityReport:
    """Signed margin of a drift vector relative to the stability cone C."""

    vector: np.ndarray
    margin: float          # distance to the boundary of C (negative outside)
    member: bool
    degenerate: bool = False


def _dual_facet_normals(generators):
    """Inward facet normals of cone(generators), by (k-1)-subset scan.

    Returns (normals, full_dimensional).  Normals are unit, deduplicated;
    an empty list with ``full_dimensional=True`` means the cone is all of
    R^k (no supporting hyperplane).
    """
    gens = np.atleast_2d(generators)
    n, k = gens.shape
    full = np.linalg.matrix_rank(gens, tol=_FACET_TOL) == k
    if not full:
        return [], False
    normals = []
    for subset in itertools.combinations(range(n), k - 1):
        a = gens[list(subset)].reshape(len(subset), k)
        # hyperplane through the subset and the origin must be unique
        u, s, vh = np.linalg.svd(a) if len(subset) else (None, np.array([]), np.eye(k))
        rank = int(np.sum(s > _FACET_TOL * max(1.0, s[0] if s.size else 1.0)))
        if rank != k - 1:
            continue
        h = vh[-1] if len(subset) else np.ones(1)
        h = h / np.linalg.norm(h)
        side = gens @ h
        if np.all(side >= -_FACET_TOL):
            pass
        elif np.all(side <= _FACET_TOL):
            h = -h
        else:
            continue
        if not any(abs(float(h @ p)) > 1.0 - 1e-9 for p in normals):
            normals.append(h)
    return normals, True


def _distance_to_cone(generators, v):
    """Euclidean distance from v to cone(generators) via nonnegative lsq."""
    _, rnorm = nnls(np.atleast_2d(generators).T, np.asarray(v, dtype=float))
    return float(rnorm)


def stability_margin(cone, v):
    """Signed distance of ``v`` to the boundary of ``C = cone{-d_i}``.

    Positive inside (exact distance to the nearest facet hyperplane),
    negative outside (minus the distance to C).  Degenerate C (not full
    dimensional) is reported, not rejected: the margin is then 0 on C and
    negative off it.
    """
    if cone.dimension > FACET_ENUM_LIMIT:
        raise DimensionLimit(
            f"facet enumeration supports k <= {FACET_ENUM_LIMIT}, got k = {cone.dimension}")
    v = np.asarray(v, dtype=float)
    gens = -cone.directions
    facets, full = _dual_facet_normals(gens)
    if not full:
        dist = _distance_to_cone(gens, v)
        if dist <= _FACET_TOL * (1.0 + np.linalg.norm(v)):
            return StabilityReport(vector=v, margin=0.0, member=True, degenerate=True)
        return StabilityReport(vector=v, margin=-dist, member=False, degenerate=True)
    if not facets:
        # generators positively span R^k: no boundary at all
        return StabilityReport(vector=v, margin=np.inf, member=True)
    m = float(min(h @ v for h in facets))
    if m >= 0.0:
        return StabilityReport(vector=v, margin=m, member=True)
    return StabilityReport(vector=v, margin=-_distance_to_cone(gens, v), member=False)


@dataclass
class DriftStabilityResult:
    satisfied: bool
    worst_point: np.ndarray
    worst_margin: float
    required_margin: float
    degenerate: bool = False


def check_drift_stability(cone, drift, sample_points, delta):
    """Check ``drift(x) in C(delta)`` over a finite sample of points in G.

    ``drift`` is a callable x -> b(x) (a :class:`DiffusionModel` drift works
    directly).  Returns the worst point and its margin.
    """
    pts = np.atleast_2d(np.asarray(sample_points, dtype=float))
    if pts.shape[0] == 0:
        raise ValueError("sample_points must be nonempty")
    if not np.all(cone.contains(pts)):
        raise OutsideCone("all sample points must lie in G")
    worst_margin, worst_point, degenerate = np.inf, pts[0], False
    for x in pts:
        rep = stability_margin(cone, np.asarray(drift(x), dtype=float))
        degenerate = degenerate or rep.degenerate
        if rep.margin < worst_margin:
            worst_margin, worst_point = rep.margin, x
    return DriftStabilityResult(
        satisfied=bool(worst_margin >= delta), worst_point=worst_point,
        worst_margin=float(worst_margin), required_margin=float(delta),
        degenerate=degenerate)
