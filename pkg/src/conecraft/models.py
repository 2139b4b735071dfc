"""Built-in drift/dispersion presets used by tests, demos and configs."""

from __future__ import annotations

import numpy as np

from .geometry import halfline, orthant
from .simulate import DiffusionModel

REFERENCE_DRIFT_SCALE = 0.025   # keeps exit times tractable across the eps grid


def constant_model(drift, sigma, eps):
    """Constant coefficients; regularity constants derived exactly."""
    b = np.asarray(drift, dtype=float)
    s = np.atleast_2d(np.asarray(sigma, dtype=float))
    sing = np.linalg.svd(s, compute_uv=False)
    return DiffusionModel(
        drift=lambda x: b, dispersion=lambda x: s, eps=float(eps),
        gamma1=float(np.linalg.norm(b)), gamma2=float(sing[0]),
        sigma_lb=float(sing[-1] ** 2))


def reference_2d(eps, drift_scale=REFERENCE_DRIFT_SCALE):
    """2-D orthant benchmark: weak constant drift toward the vertex, unit noise."""
    b = -drift_scale * np.ones(2) / np.sqrt(2.0)
    return constant_model(b, np.eye(2), eps)


def variable_2d(eps, drift_scale=0.3):
    """2-D orthant model with Lipschitz state-dependent coefficients."""
    s = float(drift_scale)
    base = -s / np.sqrt(2.0) * np.ones(2)
    eye = np.eye(2)

    def drift(x):
        x = np.asarray(x, dtype=float)
        denom = 1.0 + np.sum(x, axis=-1, keepdims=True)
        return base / denom

    def dispersion(x):
        x = np.asarray(x, dtype=float)
        r2 = np.sum(x * x, axis=-1)
        factor = 0.8 + 0.4 / (1.0 + r2)
        return factor[..., None, None] * eye

    # |b| <= s, Lip(b) <= s*sqrt(2); |sigma| <= 1.2, Lip(sigma) <= 0.26;
    # sigma sigma' >= 0.64 I
    return DiffusionModel(drift=drift, dispersion=dispersion, eps=float(eps),
                          gamma1=s * np.sqrt(2.0), gamma2=1.2, sigma_lb=0.64)


def halfline_zero(eps=1.0):
    """Driftless unit-noise motion on the half-line (reflected Brownian)."""
    return constant_model(np.zeros(1), np.ones((1, 1)), eps)


HALFLINE_DRIFT_SCALE = 0.01    # weaker than 2-D: the 1-D barrier is steeper


def halfline_stable(eps, drift_scale=HALFLINE_DRIFT_SCALE):
    """Half-line with weak constant drift toward the origin."""
    return constant_model(np.array([-drift_scale]), np.ones((1, 1)), eps)


MODEL_PRESETS = {
    "reference2d": reference_2d,
    "variable2d": variable_2d,
    "halfline_zero": halfline_zero,
    "halfline_stable": halfline_stable,
}

CONE_PRESETS = {
    "orthant": orthant,
    "halfline": lambda k=1: halfline(),
}


def make_model(name, eps, **params):
    if name not in MODEL_PRESETS:
        raise KeyError(f"unknown model preset '{name}' "
                       f"(known: {sorted(MODEL_PRESETS)})")
    return MODEL_PRESETS[name](eps, **params)
