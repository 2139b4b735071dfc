"""Constrained Euler-Maruyama integration in a polyhedral cone.

One step proposes ``z + b(z) dt + eps * sigma(z) dW`` and constrains the
proposal back into G through the complementarity step, accumulating the
per-face pushing amounts.  The same stepper with zero noise integrates the
constrained drift flow.  The rescaled process runs the original dynamics
viewed at scale ``eps^2`` in space and time, where it carries O(1) noise and
the coefficients ``b(eps^2 .)``, ``sigma(eps^2 .)``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np

from .errors import PreconditionError
from .geometry import face_tolerance
from .skorokhod import project_batch, project_step

REST_SPEED_TOL = 1e-6
_GRID_REL_TOL = 1e-9

INCREMENTS_MAGIC = b"RSDEINCR"


@dataclass(frozen=True)
class DiffusionModel:
    """Drift, dispersion and the declared regularity constants.

    ``drift`` maps points with shape (..., k) to arrays broadcastable to the
    same shape; ``dispersion`` returns either a constant (k, k) matrix or a
    (..., k, k) field.  ``gamma1`` bounds the drift and its Lipschitz
    constant, ``gamma2`` does the same for the dispersion, and ``sigma_lb``
    is the uniform-ellipticity lower bound of ``sigma sigma'``.  The
    constants are declared by the caller and spot-checked statistically.
    """

    drift: object
    dispersion: object
    eps: float
    gamma1: float
    gamma2: float
    sigma_lb: float

    def with_eps(self, eps):
        return replace(self, eps=float(eps))


def drift_at(model, x):
    b = np.asarray(model.drift(x), dtype=float)
    if b.shape != np.shape(x):
        b = np.broadcast_to(b, np.shape(x))
    return b


def noise_at(model, x, dw):
    """Apply ``sigma(x)`` to Wiener increments ``dw`` (same shape as x)."""
    s = np.asarray(model.dispersion(x), dtype=float)
    if s.ndim == 2:
        return dw @ s.T
    return np.einsum("...ij,...j->...i", s, dw)


def scaled_model(model):
    """Coefficients of the O(1)-scale process: ``b(eps^2 .)`` with unit noise."""
    e2 = model.eps ** 2
    return DiffusionModel(
        drift=lambda y: model.drift(e2 * y),
        dispersion=lambda y: model.dispersion(e2 * y),
        eps=1.0, gamma1=model.gamma1, gamma2=model.gamma2,
        sigma_lb=model.sigma_lb)


def time_grid(horizon, dt):
    """Number of steps and per-step widths covering [0, horizon]."""
    if dt <= 0.0 or horizon <= 0.0:
        raise ValueError("dt and horizon must be positive")
    if dt > horizon * (1.0 + _GRID_REL_TOL):
        raise ValueError("dt must not exceed the horizon")
    ratio = horizon / dt
    n = int(round(ratio))
    if n >= 1 and abs(ratio - n) <= _GRID_REL_TOL * max(1.0, ratio):
        widths = np.full(n, dt)
        widths[-1] = horizon - (n - 1) * dt
    else:
        n = int(np.ceil(ratio - _GRID_REL_TOL))
        widths = np.full(n, dt)
        widths[-1] = horizon - (n - 1) * dt
    return n, widths


@dataclass
class SimPath:
    """One constrained trajectory on a uniform grid.

    ``face_pushes`` is the running per-face total (componentwise
    nondecreasing); ``increments`` records the raw Wiener increments so a
    run can be replayed or coupled.
    """

    times: np.ndarray        # (n+1,)
    states: np.ndarray       # (n+1, k)
    face_pushes: np.ndarray  # (n+1, N)
    increments: np.ndarray   # (n, k)
    dt: float
    eps: float

    @property
    def terminal(self):
        return self.states[-1]

    def decomposition_residual(self, cone, model):
        """Relative defect of Z(T) = x0 + int b + eps int s dW + D Y(T)."""
        widths = np.diff(self.times)
        bsum = np.sum(drift_at(model, self.states[:-1]) * widths[:, None], axis=0)
        nsum = np.sum(noise_at(model, self.states[:-1], self.increments), axis=0)
        pushed = self.face_pushes[-1] @ cone.directions
        recon = self.states[0] + bsum + model.eps * nsum + pushed
        return float(np.linalg.norm(recon - self.states[-1])
                     / (1.0 + np.linalg.norm(self.states[-1])))


def step_euler(cone, m, model, z, dw, dt):
    """One explicit Euler step composed with the constraint step."""
    z = np.asarray(z, dtype=float)
    p = z + drift_at(model, z) * dt + model.eps * noise_at(model, z, np.asarray(dw, dtype=float))
    return project_step(cone, m, p)


def step_batch(cone, m, model, z, dw, dt):
    """Vectorized :func:`step_euler` over a batch of states (B, k)."""
    p = z + drift_at(model, z) * dt + model.eps * noise_at(model, z, dw)
    return project_batch(cone, m, p)


def _check_start(cone, x0):
    x0 = np.asarray(x0, dtype=float)
    if np.min(cone.gaps(x0)) < -face_tolerance(x0):
        raise PreconditionError(f"start {x0} is outside the cone")
    return x0


def simulate_path(cone, model, x0, horizon, dt, rng=None, increments=None, m=None):
    """Integrate one constrained trajectory to ``horizon``.

    ``increments`` replays recorded Wiener increments; otherwise they are
    drawn from ``rng`` as Normal(0, step).  Bitwise reproducible given the
    stream and the grid.
    """
    if m is None:
        m = cone.normals @ cone.directions.T
    x0 = _check_start(cone, x0)
    k = cone.dimension
    n, widths = time_grid(horizon, dt)
    if increments is None:
        if rng is None:
            raise ValueError("either rng or increments is required")
        increments = rng.standard_normal((n, k)) * np.sqrt(widths)[:, None]
    else:
        increments = np.asarray(increments, dtype=float)
        if increments.shape != (n, k):
            raise ValueError(f"increments must have shape {(n, k)}")
    states = np.empty((n + 1, k))
    pushes = np.empty((n + 1, cone.n_faces))
    states[0] = x0
    pushes[0] = 0.0
    z = x0[None, :]
    y = np.zeros((1, cone.n_faces))
    for j in range(n):
        p = z + drift_at(model, z) * widths[j] + model.eps * noise_at(model, z, increments[j][None, :])
        z, a = project_batch(cone, m, p)
        y = y + a
        states[j + 1] = z[0]
        pushes[j + 1] = y[0]
    times = np.concatenate([[0.0], np.cumsum(widths)])
    return SimPath(times=times, states=states, face_pushes=pushes,
                   increments=increments, dt=dt, eps=model.eps)


def flow_ode(cone, model, x0, horizon, dt, m=None):
    """Constrained drift flow: the zero-noise trajectory (deterministic)."""
    n, _ = time_grid(horizon, dt)
    zero = np.zeros((n, cone.dimension))
    return simulate_path(cone, model.with_eps(0.0), x0, horizon, dt,
                         increments=zero, m=m)


def simulate_scaled(cone, model, x_bar, horizon, dt, rng=None, increments=None, m=None):
    """Simulate the O(1)-scale process started from ``x_bar = x / eps^2``."""
    return simulate_path(cone, scaled_model(model), x_bar, horizon, dt,
                         rng=rng, increments=increments, m=m)


def terminal_batch(cone, model, x0, horizon, dt, rng, capture_times=(), m=None):
    """Terminal states of many independent replicas (vectorized).

    ``x0`` is a single point or a (B, k) batch of starts.  Returns the
    (B, k) terminal array plus one (B, k) snapshot per requested capture
    time (snapshots are taken at the nearest grid time).
    """
    if m is None:
        m = cone.normals @ cone.directions.T
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    if not np.all(cone.contains(x0)):
        raise PreconditionError("all starts must lie in the cone")
    nb, k = x0.shape
    n, widths = time_grid(horizon, dt)
    cum = np.cumsum(widths)
    capture_idx = [int(np.argmin(np.abs(cum - tc))) for tc in capture_times]
    snaps = [None] * len(capture_idx)
    z = x0.copy()
    for j in range(n):
        dw = rng.standard_normal((nb, k)) * np.sqrt(widths[j])
        z, _ = step_batch(cone, m, model, z, dw, widths[j])
        for ci, cj in enumerate(capture_idx):
            if cj == j:
                snaps[ci] = z.copy()
    return z, snaps


@dataclass(frozen=True)
class BallDomain:
    """``{x : |x - center| < radius}`` (intersected with G by context)."""

    radius: float
    center: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float))
        if self.radius <= 0.0:
            raise ValueError("radius must be positive")

    def boundary_distance(self, x):
        """Signed distance to the boundary: positive inside."""
        d = np.linalg.norm(np.asarray(x, dtype=float) - self.center, axis=-1)
        return self.radius - d

    def contains(self, x):
        return self.boundary_distance(x) >= 0.0

    def project_boundary(self, x):
        """Radial projection onto the sphere (used to snap exit points)."""
        v = np.asarray(x, dtype=float) - self.center
        nrm = np.linalg.norm(v, axis=-1, keepdims=True)
        nrm = np.where(nrm == 0.0, 1.0, nrm)
        return self.center + self.radius * v / nrm

    def crossing(self, old, new):
        """Fraction s of the segment old -> new at which the sphere is hit."""
        v = np.atleast_2d(old) - self.center
        d = np.atleast_2d(new) - np.atleast_2d(old)
        a = np.sum(d * d, axis=-1)
        b = 2.0 * np.sum(v * d, axis=-1)
        c = np.sum(v * v, axis=-1) - self.radius ** 2
        disc = np.sqrt(np.maximum(b * b - 4.0 * a * c, 0.0))
        a = np.where(a == 0.0, 1.0, a)
        return np.clip((-b + disc) / (2.0 * a), 0.0, 1.0)

    def describe(self):
        return {"shape": "ball", "radius": float(self.radius),
                "center": [float(c) for c in np.atleast_1d(self.center)]}


@dataclass(frozen=True)
class HalfspaceDomain:
    """``{x : <a_j, x> < c_j  for all j}`` intersected with G by context.

    The boundary distance is the minimum hyperplane distance, a lower bound
    for the true boundary distance of the intersection.
    """

    normals: np.ndarray   # (J, k)
    offsets: np.ndarray   # (J,)

    def __post_init__(self):
        a = np.atleast_2d(np.asarray(self.normals, dtype=float))
        c = np.atleast_1d(np.asarray(self.offsets, dtype=float))
        object.__setattr__(self, "normals", a)
        object.__setattr__(self, "offsets", c)

    def boundary_distance(self, x):
        slack = self.offsets - np.asarray(x, dtype=float) @ self.normals.T
        scaled = slack / np.linalg.norm(self.normals, axis=1)
        return np.min(scaled, axis=-1)

    def contains(self, x):
        return self.boundary_distance(x) >= 0.0

    def project_boundary(self, x):
        x = np.asarray(x, dtype=float)
        slack = self.offsets - x @ self.normals.T
        scaled = slack / np.linalg.norm(self.normals, axis=1)
        j = np.argmin(scaled, axis=-1)
        a = self.normals[j]
        nrm2 = np.sum(a * a, axis=-1, keepdims=True)
        gap = (np.take(self.offsets, j) - np.sum(a * x, axis=-1)) / nrm2[..., 0]
        return x + a * gap[..., None]

    def crossing(self, old, new):
        old = np.atleast_2d(old)
        d = np.atleast_2d(new) - old
        num = self.offsets - old @ self.normals.T
        den = d @ self.normals.T
        with np.errstate(divide="ignore", invalid="ignore"):
            s = np.where(den > 0.0, num / den, np.inf)
        return np.clip(np.min(s, axis=-1), 0.0, 1.0)

    def describe(self):
        return {"shape": "halfspaces",
                "normals": self.normals.tolist(), "offsets": self.offsets.tolist()}


@dataclass
class StartClassification:
    """Outcome of following the drift flow inside a bounded domain."""

    status: str                    # 'settled' | 'exited' | 'horizon'
    in_b_gamma: bool | None        # None when inconclusive (horizon hit)
    min_boundary_distance: float
    rest_point: np.ndarray | None
    elapsed: float


def classify_start(cone, model, domain, x0, gamma, t_max, dt, m=None):
    """Decide whether ``x0`` lies in the gamma-safe start set of ``domain``.

    Follows the zero-noise flow until it settles (speed below 1e-6), exits
    the domain, or reaches ``t_max`` (inconclusive).  The reported distance
    is the minimum over the visited grid of the signed boundary distance.
    """
    if m is None:
        m = cone.normals @ cone.directions.T
    x0 = _check_start(cone, x0)
    d0 = float(domain.boundary_distance(x0))
    if d0 < 0.0:
        raise PreconditionError(f"start {x0} is outside the domain")
    zero_model = model.with_eps(0.0)
    n, widths = time_grid(t_max, dt)
    z = x0[None, :].copy()
    min_dist = d0
    elapsed = 0.0
    zero = np.zeros((1, cone.dimension))
    for j in range(n):
        znew, _ = step_batch(cone, m, zero_model, z, zero, widths[j])
        elapsed += widths[j]
        dist = float(domain.boundary_distance(znew[0]))
        min_dist = min(min_dist, dist)
        if dist <= 0.0:
            return StartClassification(status="exited", in_b_gamma=False,
                                       min_boundary_distance=min_dist,
                                       rest_point=None, elapsed=elapsed)
        speed = float(np.linalg.norm(znew[0] - z[0])) / widths[j]
        z = znew
        if speed <= REST_SPEED_TOL:
            return StartClassification(status="settled",
                                       in_b_gamma=bool(min_dist >= gamma),
                                       min_boundary_distance=min_dist,
                                       rest_point=z[0].copy(), elapsed=elapsed)
    return StartClassification(status="horizon", in_b_gamma=None,
                               min_boundary_distance=min_dist,
                               rest_point=None, elapsed=elapsed)


def coupled_scaling_gap(cone, model, x_bar, horizon, dt, n_paths, rng, m=None):
    """Sup gap between ``eps^-2 Z(eps^2 t)`` and the rescaled process.

    Both sides share the same Wiener noise (``dW = eps * dW_scaled`` on the
    matched grid); the returned per-path sup-norm gaps measure how far the
    discretization is from the exact change of variables.
    """
    if m is None:
        m = cone.normals @ cone.directions.T
    eps = model.eps
    e2 = eps ** 2
    x_bar = np.atleast_2d(np.asarray(x_bar, dtype=float))
    if x_bar.shape[0] == 1:
        x_bar = np.repeat(x_bar, n_paths, axis=0)
    if not np.all(cone.contains(x_bar)):
        raise PreconditionError("rescaled starts must lie in the cone")
    nb, k = x_bar.shape
    n, widths = time_grid(horizon, dt)
    smodel = scaled_model(model)
    z_scaled = x_bar.copy()
    z_orig = e2 * x_bar
    gaps = np.zeros(nb)
    for j in range(n):
        dw = rng.standard_normal((nb, k)) * np.sqrt(widths[j])
        z_scaled, _ = step_batch(cone, m, smodel, z_scaled, dw, widths[j])
        z_orig, _ = step_batch(cone, m, model, z_orig, eps * dw, e2 * widths[j])
        gaps = np.maximum(gaps, np.linalg.norm(z_orig / e2 - z_scaled, axis=1))
    return gaps


def strong_error(cone, model, x0, horizon, dt, refine_factor, n_paths, rng, m=None):
    """Mean terminal gap between a dt run and a shared-noise dt/refine run."""
    if m is None:
        m = cone.normals @ cone.directions.T
    x0 = _check_start(cone, x0)
    n, widths = time_grid(horizon, dt)
    nb, k = n_paths, cone.dimension
    z_c = np.repeat(x0[None, :], nb, axis=0)
    z_f = z_c.copy()
    for j in range(n):
        sub = rng.standard_normal((refine_factor, nb, k)) * np.sqrt(widths[j] / refine_factor)
        for r in range(refine_factor):
            z_f, _ = step_batch(cone, m, model, z_f, sub[r], widths[j] / refine_factor)
        z_c, _ = step_batch(cone, m, model, z_c, sub.sum(axis=0), widths[j])
    return float(np.mean(np.linalg.norm(z_c - z_f, axis=1)))


@dataclass
class ModelValidation:
    checks: list

    @property
    def passed(self):
        return all(c.passed for c in self.checks)

    def failures(self):
        return [c for c in self.checks if not c.passed]


def validate_model(cone, model, n_pairs=10_000, seed=0, scale=3.0, m=None):
    """Statistical spot-check of the declared coefficient constants.

    Random point pairs in G (Gaussians at mixed scales constrained into the
    cone) probe the Lipschitz and bound constants of drift and dispersion,
    and random directions probe the ellipticity floor.  Declared constants
    are trusted once the spot-check passes.
    """
    from .geometry import CheckResult

    if m is None:
        m = cone.normals @ cone.directions.T
    rng = np.random.default_rng(seed)
    k = cone.dimension
    radii = scale * np.exp(rng.uniform(-2.0, 1.0, size=(2 * n_pairs, 1)))
    pts, _ = project_batch(cone, m, radii * rng.standard_normal((2 * n_pairs, k)))
    x, y = pts[:n_pairs], pts[n_pairs:]

    bx, by = drift_at(model, x), drift_at(model, y)
    sep = np.linalg.norm(x - y, axis=1)
    ok = sep > 1e-12
    lip_b = float(np.max(np.linalg.norm(bx[ok] - by[ok], axis=1) / sep[ok]))
    bound_b = float(np.max(np.linalg.norm(bx, axis=1)))

    def _sig(v):
        s = np.asarray(model.dispersion(v), dtype=float)
        if s.ndim == 2:
            s = np.broadcast_to(s, (v.shape[0],) + s.shape)
        return s

    sx, sy = _sig(x), _sig(y)
    op = np.linalg.svd(sx, compute_uv=False)[:, 0]
    bound_s = float(np.max(op))
    dif = np.linalg.svd(sx[ok] - sy[ok], compute_uv=False)[:, 0]
    lip_s = float(np.max(dif / sep[ok]))

    v = rng.standard_normal((n_pairs, k))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    sv = np.einsum("bij,bj->bi", np.swapaxes(sx, 1, 2), v)
    ell = float(np.min(np.sum(sv * sv, axis=1)))

    checks = [
        CheckResult("drift_lipschitz", lip_b <= model.gamma1 * (1 + 1e-9),
                    model.gamma1 - lip_b, f"max ratio {lip_b:.6g} vs gamma1 {model.gamma1:.6g}"),
        CheckResult("drift_bound", bound_b <= model.gamma1 * (1 + 1e-9),
                    model.gamma1 - bound_b, f"max |b| {bound_b:.6g}"),
        CheckResult("dispersion_lipschitz", lip_s <= model.gamma2 * (1 + 1e-9),
                    model.gamma2 - lip_s, f"max ratio {lip_s:.6g} vs gamma2 {model.gamma2:.6g}"),
        CheckResult("dispersion_bound", bound_s <= model.gamma2 * (1 + 1e-9),
                    model.gamma2 - bound_s, f"max |sigma| {bound_s:.6g}"),
        CheckResult("ellipticity", ell >= model.sigma_lb * (1 - 1e-9),
                    ell - model.sigma_lb, f"min v's s'v {ell:.6g} vs floor {model.sigma_lb:.6g}"),
    ]
    return ModelValidation(checks=checks)


def write_increments(path, increments):
    """Persist Wiener increments: 16-byte header then float64 little-endian."""
    increments = np.asarray(increments, dtype="<f8")
    if increments.ndim != 2:
        raise ValueError("increments must be a (steps, k) array")
    n, k = increments.shape
    with open(path, "wb") as fh:
        fh.write(INCREMENTS_MAGIC)
        fh.write(struct.pack("<II", k, n))
        fh.write(increments.tobytes(order="C"))


def read_increments(path):
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != INCREMENTS_MAGIC:
            raise ValueError("not an increments record")
        k, n = struct.unpack("<II", fh.read(8))
        data = np.frombuffer(fh.read(8 * n * k), dtype="<f8")
    return data.reshape(n, k).astype(float)
