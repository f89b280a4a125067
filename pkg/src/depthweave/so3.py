"""Small rotation-group utilities: skew matrices and the exponential map."""

from __future__ import annotations

import numpy as np

# skew(e_k) for the three coordinate axes
SKEW_BASIS = np.array(
    [
        [[0.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]],
        [[0.0, 0.0, 1.0], [0.0, 0.0, 0.0], [-1.0, 0.0, 0.0]],
        [[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]],
    ]
)


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrices of (..., 3) vectors, shape (..., 3, 3)."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def rotation_exp(omega: np.ndarray) -> np.ndarray:
    """Rodrigues exponential of (..., 3) axis-angle vectors.

    Exact rotation matrices (orthonormal, det +1) with a series fallback
    near zero angle.
    """
    w = np.asarray(omega, dtype=float)
    theta = np.linalg.norm(w, axis=-1)
    K = skew(w)
    K2 = K @ K
    t = theta[..., None, None]
    small = t < 1e-8
    with np.errstate(invalid="ignore", divide="ignore"):
        a = np.where(small, 1.0 - t * t / 6.0, np.sin(t) / np.where(small, 1.0, t))
        b = np.where(small, 0.5 - t * t / 24.0, (1.0 - np.cos(t)) / np.where(small, 1.0, t * t))
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + a * K + b * K2
