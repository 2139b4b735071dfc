"""Discrete Skorokhod problem for piecewise-linear inputs.

A path ``psi`` starting in G is constrained to G by per-breakpoint pushes
along the directions ``d_i``, active only on the corresponding faces.  Each
step solves the linear complementarity problem

    w = q + M a,   a >= 0,  w >= 0,  a . w = 0,

with ``q_i = <n_i, p>`` for the unconstrained proposal ``p`` and
``M_ij = <n_i, d_j>``, by projected Gauss-Seidel sweeps.  The constrained
point is ``z = p + sum_i a_i d_i``.
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

from .errors import NoConvergence, StartOutside
from .geometry import face_tolerance

S_CERT_LIMIT = 12
FEAS_SCALE = 1e-9      # face violation allowance, times (1 + |p|)
COMP_SCALE = 1e-10     # complementarity allowance, times (1 + |p|)


@dataclass
class PiecewisePath:
    """Piecewise-linear path: strictly increasing times, t_0 = 0."""

    times: np.ndarray     # (m+1,)
    values: np.ndarray    # (m+1, k)

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if t.ndim != 1 or t.shape[0] != v.shape[0]:
            raise ValueError("times and values must have matching lengths")
        if t.shape[0] < 2:
            raise ValueError("need at least two breakpoints")
        if t[0] != 0.0:
            raise ValueError("paths start at t = 0")
        if np.any(np.diff(t) <= 0.0):
            raise ValueError("times must be strictly increasing")
        if not np.all(np.isfinite(v)):
            raise ValueError("values must be finite")
        self.times = t
        self.values = v

    @property
    def dimension(self):
        return self.values.shape[1]

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        out = np.stack([np.interp(t, self.times, self.values[:, j])
                        for j in range(self.dimension)], axis=-1)
        return out

    def refined(self, mesh):
        """Subdivide every segment to width <= mesh; exact at breakpoints."""
        if mesh is None:
            return self.times.copy(), self.values.copy()
        if mesh <= 0.0:
            raise ValueError("mesh must be positive")
        ts = [np.array([0.0])]
        vs = [self.values[:1]]
        for j in range(len(self.times) - 1):
            t0, t1 = self.times[j], self.times[j + 1]
            nsub = max(1, int(np.ceil((t1 - t0) / mesh - 1e-12)))
            frac = np.arange(1, nsub + 1) / nsub
            ts.append(t0 + frac * (t1 - t0))
            vs.append(self.values[j] + frac[:, None] * (self.values[j + 1] - self.values[j]))
        return np.concatenate(ts), np.concatenate(vs, axis=0)


@dataclass
class ReflectionMatrix:
    """``M_ij = <n_i, d_j>`` plus the completely-S solvability certificate."""

    matrix: np.ndarray
    completely_s: bool | None    # None when the certificate was skipped


def _is_s_matrix(a):
    """S-property of a square matrix: exists x >= 0 with a @ x > 0 (by LP)."""
    m = a.shape[0]
    c = np.zeros(m + 1)
    c[-1] = -1.0
    a_ub = np.hstack([-a, np.ones((m, 1))])
    res = linprog(c, A_ub=a_ub, b_ub=np.zeros(m),
                  bounds=[(0.0, 1.0)] * m + [(0.0, 1.0)], method="highs")
    return bool(res.status == 0 and -res.fun > 1e-9)


def reflection_matrix(cone):
    """Build the reflection matrix and certify the completely-S property.

    The certificate brute-forces every principal submatrix (an LP each) and
    is skipped with a warning for N > 12.
    """
    m = cone.normals @ cone.directions.T
    n = m.shape[0]
    if n > S_CERT_LIMIT:
        warnings.warn(f"completely-S certificate skipped for N = {n} > {S_CERT_LIMIT}")
        return ReflectionMatrix(matrix=m, completely_s=None)
    cert = True
    for size in range(1, n + 1):
        for subset in itertools.combinations(range(n), size):
            if not _is_s_matrix(m[np.ix_(subset, subset)]):
                cert = False
                break
        if not cert:
            break
    return ReflectionMatrix(matrix=m, completely_s=cert)


def _as_matrix(m):
    return m.matrix if isinstance(m, ReflectionMatrix) else np.asarray(m, dtype=float)


def project_batch(cone, m, p, max_sweeps=None):
    """Constrain a batch of points to G in one complementarity solve each.

    Returns ``(z, alpha)`` with ``z[b] = p[b] + alpha[b] @ directions``.
    Rows already in G are returned untouched with zero pushes.
    """
    mat = _as_matrix(m)
    p = np.atleast_2d(np.asarray(p, dtype=float))
    nb, k = p.shape
    n = mat.shape[0]
    q = p @ cone.normals.T
    z = p.copy()
    alpha = np.zeros((nb, n))
    need = np.flatnonzero((q < 0.0).any(axis=1))
    if need.size == 0:
        return z, alpha
    scale = 1.0 + np.linalg.norm(p[need], axis=1)
    tf = FEAS_SCALE * scale
    tc = COMP_SCALE * scale
    qa = q[need]
    aa = np.zeros((need.size, n))
    diag = np.diag(mat)
    cap = max_sweeps if max_sweeps is not None else 10 * n * k
    live = np.arange(need.size)
    worst = np.inf
    for _ in range(cap):
        for i in range(n):
            w_i = qa[live, i] + aa[live] @ mat[i]
            aa[live, i] = np.maximum(0.0, aa[live, i] - w_i / diag[i])
        w = qa[live] + aa[live] @ mat.T
        bad = ((w < -tf[live, None]) | (aa[live] * w > tc[live, None])).any(axis=1)
        if not bad.any():
            live = live[:0]
            break
        worst = float(max(np.max(-w), np.max(aa[live] * w)))
        live = live[bad]
    if live.size:
        raise NoConvergence(
            f"projected Gauss-Seidel did not converge for {live.size} point(s) "
            f"within {cap} sweeps (residual {worst:.3g}); reflection data may "
            "not be completely-S", residual=worst)
    z[need] = p[need] + aa @ cone.directions
    alpha[need] = aa
    return z, alpha


def project_step(cone, m, p, max_sweeps=None):
    """Single-point constraint step; see :func:`project_batch`."""
    z, alpha = project_batch(cone, m, np.asarray(p, dtype=float)[None, :], max_sweeps)
    return z[0], alpha[0]


@dataclass
class ReflectedPath:
    """Solution (phi, eta) of the discrete Skorokhod problem on a grid.

    ``pushes[j]`` holds the per-face amounts applied over step j, so
    ``eta[j+1] - eta[j] = pushes[j] @ directions`` and ``phi = psi + eta``
    holds at every grid time.
    """

    times: np.ndarray            # (m+1,)
    input_values: np.ndarray     # (m+1, k) refined psi
    values: np.ndarray           # (m+1, k) phi
    pushing: np.ndarray          # (m+1, k) eta
    pushes: np.ndarray           # (m, N) per-step alpha
    total_variation: np.ndarray  # (m+1,) running |eta|

    @property
    def terminal(self):
        return self.values[-1]

    def complementarity_residual(self, cone):
        """max over steps and faces of alpha_i * <phi, n_i> / (1 + |phi|)."""
        gaps = self.values[1:] @ cone.normals.T
        scale = 1.0 + np.linalg.norm(self.values[1:], axis=1)
        prod = self.pushes * gaps
        return float(np.max(prod / scale[:, None])) if prod.size else 0.0


@dataclass
class ReflectedBatch:
    """Vectorized solve of many paths sharing one time grid."""

    times: np.ndarray            # (m+1,)
    input_values: np.ndarray     # (B, m+1, k)
    values: np.ndarray           # (B, m+1, k)
    pushes: np.ndarray           # (B, m, N)
    directions: np.ndarray       # (N, k)

    def __len__(self):
        return self.values.shape[0]

    def path(self, b):
        deta = self.pushes[b] @ self.directions
        eta = np.vstack([np.zeros((1, self.values.shape[2])), np.cumsum(deta, axis=0)])
        tv = np.concatenate([[0.0], np.cumsum(np.linalg.norm(deta, axis=1))])
        return ReflectedPath(times=self.times, input_values=self.input_values[b],
                             values=self.values[b], pushing=eta,
                             pushes=self.pushes[b], total_variation=tv)


def _solve_grid(cone, m, values):
    """Sequential constraint of batched paths ``values`` (B, m+1, k)."""
    nb, npts, k = values.shape
    n = cone.n_faces
    phi = np.empty_like(values)
    pushes = np.empty((nb, npts - 1, n))
    z = values[:, 0, :].copy()
    phi[:, 0] = z
    for j in range(npts - 1):
        p = z + (values[:, j + 1] - values[:, j])
        z, a = project_batch(cone, m, p)
        phi[:, j + 1] = z
        pushes[:, j] = a
    return phi, pushes


def _assemble(cone, times, psi_vals, phi, pushes):
    deta = pushes @ cone.directions                      # (m, k)
    eta = np.vstack([np.zeros((1, phi.shape[1])), np.cumsum(deta, axis=0)])
    tv = np.concatenate([[0.0], np.cumsum(np.linalg.norm(deta, axis=1))])
    return ReflectedPath(times=times, input_values=psi_vals, values=phi,
                         pushing=eta, pushes=pushes, total_variation=tv)


def solve_sp(cone, psi, refine=None, m=None):
    """Solve the Skorokhod problem for a piecewise-linear path.

    Subdivides each segment to width <= ``refine`` and applies the
    complementarity step sequentially.  Raises :class:`StartOutside` when
    ``psi(0)`` is not in G.
    """
    if m is None:
        m = cone.normals @ cone.directions.T
    start = psi.values[0]
    if np.min(cone.gaps(start)) < -face_tolerance(start):
        raise StartOutside(f"psi(0) = {start} is outside the cone")
    times, vals = psi.refined(refine)
    phi, pushes = _solve_grid(cone, m, vals[None, :, :])
    return _assemble(cone, times, vals, phi[0], pushes[0])


def solve_sp_grid(cone, times, values, m=None):
    """Batch variant of :func:`solve_sp` for paths sharing a time grid.

    ``values`` has shape (B, m+1, k); no further refinement is applied.
    """
    if m is None:
        m = cone.normals @ cone.directions.T
    values = np.asarray(values, dtype=float)
    starts = values[:, 0, :]
    gaps = starts @ cone.normals.T
    tol = face_tolerance(starts)
    if np.any(np.min(gaps, axis=1) < -tol):
        bad = int(np.argmin(np.min(gaps, axis=1)))
        raise StartOutside(f"path {bad} starts outside the cone")
    phi, pushes = _solve_grid(cone, m, values)
    return ReflectedBatch(times=np.asarray(times, dtype=float),
                          input_values=values, values=phi, pushes=pushes,
                          directions=cone.directions)


def solve_sp_many(cone, paths, refine=None, m=None):
    """Solve many paths with unrelated grids in one vectorized sweep.

    Shorter paths are padded with zero increments (a no-op for the
    constraint step), stepped together, then unpadded.  Returns one
    :class:`ReflectedPath` per input path.
    """
    if m is None:
        m = cone.normals @ cone.directions.T
    refined = [p.refined(refine) for p in paths]
    lens = [t.shape[0] for t, _ in refined]
    lmax = max(lens)
    k = cone.dimension
    vals = np.empty((len(paths), lmax, k))
    for i, (_t, v) in enumerate(refined):
        vals[i, :lens[i]] = v
        vals[i, lens[i]:] = v[lens[i] - 1]
    batch = solve_sp_grid(cone, np.arange(lmax, dtype=float), vals, m=m)
    return [_assemble(cone, t, v, batch.values[i, :lens[i]],
                      batch.pushes[i, :lens[i] - 1])
            for i, (t, v) in enumerate(refined)]


def reflect_halfline(values):
    """Explicit solution of the half-line Skorokhod problem.

    ``phi(t) = psi(t) + max(0, max_{s<=t} -psi(s))`` evaluated on the grid;
    works on a single path (m+1,) or a batch (..., m+1).  This is the
    independent oracle the sequential solver is checked against.
    """
    v = np.asarray(values, dtype=float)
    return v + np.maximum(0.0, np.maximum.accumulate(-v, axis=-1))


@dataclass
class LipschitzProbe:
    """Empirical sup-norm expansion ratios of the constraint map."""

    k_hat: float
    ratios: np.ndarray
    hist_counts: np.ndarray
    hist_edges: np.ndarray
    n_used: int
    n_skipped: int

    def quantile(self, q):
        return float(np.quantile(self.ratios, q)) if self.ratios.size else np.nan


def lipschitz_probe(cone, path_generator, n_pairs, seed, refine=None, m=None):
    """Probe the Lipschitz constant of the constraint map on random pairs.

    ``path_generator(rng)`` must yield two :class:`PiecewisePath` objects on
    a shared time grid.  Pairs with input sup-distance below 1e-12 are
    skipped.  Deterministic given ``seed``.
    """
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    if m is None:
        m = cone.normals @ cone.directions.T
    rng = np.random.default_rng(seed)
    ratios = []
    n_skipped = 0
    for _ in range(n_pairs):
        p1, p2 = path_generator(rng)
        if not np.array_equal(p1.times, p2.times):
            raise ValueError("path pairs must share a time grid")
        t, v1 = p1.refined(refine)
        _, v2 = p2.refined(refine)
        din = float(np.max(np.linalg.norm(v1 - v2, axis=1)))
        if din < 1e-12:
            n_skipped += 1
            continue
        batch = solve_sp_grid(cone, t, np.stack([v1, v2]), m=m)
        dout = float(np.max(np.linalg.norm(batch.values[0] - batch.values[1], axis=1)))
        ratios.append(dout / din)
    ratios = np.asarray(ratios)
    counts, edges = np.histogram(ratios, bins=20) if ratios.size else (np.array([]), np.array([]))
    k_hat = float(ratios.max()) if ratios.size else 0.0
    return LipschitzProbe(k_hat=k_hat, ratios=ratios, hist_counts=counts,
                          hist_edges=edges, n_used=int(ratios.size),
                          n_skipped=n_skipped)


def random_path_pairs(cone, m=None, n_breaks=20, duration=1.0, scale=1.0,
                      jitter=0.5):
    """Generator factory for :func:`lipschitz_probe`.

    Produces Brownian-like piecewise-linear pairs sharing breakpoints and a
    common start in G (a random point constrained into the cone).
    """
    if m is None:
        m = cone.normals @ cone.directions.T
    k = cone.dimension

    def gen(rng):
        interior = rng.uniform(0.0, duration, size=max(0, n_breaks - 1))
        times = np.concatenate([[0.0], np.sort(interior), [duration]])
        times = np.unique(times)
        x0, _ = project_step(cone, m, scale * rng.standard_normal(k))
        steps = np.sqrt(np.diff(times))[:, None]
        inc1 = scale * steps * rng.standard_normal((len(times) - 1, k))
        inc2 = inc1 + jitter * steps * rng.standard_normal((len(times) - 1, k))
        v1 = x0 + np.vstack([np.zeros((1, k)), np.cumsum(inc1, axis=0)])
        v2 = x0 + np.vstack([np.zeros((1, k)), np.cumsum(inc2, axis=0)])
        return PiecewisePath(times, v1), PiecewisePath(times, v2)

    return gen
