"""Projections onto the l1 ball and the l-infinity proximal operator.

The l-infinity prox is obtained from the l1-ball projection through the
Moreau decomposition::

    prox_{t||.||_inf}(v) = v - t * proj_{||.||_1 <= 1}(v / t)

Expanding the sorting rule, this equals ``v`` clipped to ``[-r, r]`` with
``r = t * theta(v / t)``, which is what the prox evaluates: scaling ``v`` by
``1 / t`` first would lose ``t`` entirely once ``||v||_1 / t`` passes 1e16.

All matrix routines act on columns (or on contiguous column segments for the
grouped variants) independently.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .tensor import as_matrix

# below this ratio t / ||v||_inf the prox is the identity to working precision
_TINY_STEP = 1e-300


@dataclass(frozen=True)
class ProjectionResult:
    """Projected values plus the threshold ``theta`` and active-set size ``rho``.

    For the vector routine ``theta`` and ``rho`` are scalars; for matrices
    they hold one entry per column (or per segment). Both are zero wherever
    the input already lay inside the ball.
    """

    w: np.ndarray
    theta: np.ndarray | float
    rho: np.ndarray | int


def _check_eps(eps: float) -> None:
    if not eps > 0:
        raise ConfigError(f"eps must be positive, got {eps}")


def project_l1_vector(v, eps: float = 1.0) -> ProjectionResult:
    """Euclidean projection of ``v`` onto ``{x : ||x||_1 <= eps}``."""
    _check_eps(eps)
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError("v must be 1-D")
    a = np.abs(v)
    if a.sum() <= eps:
        return ProjectionResult(v.copy(), 0.0, 0)
    mu = np.sort(a, kind="stable")[::-1]
    csum = np.cumsum(mu)
    idx = np.arange(1, v.size + 1)
    active = mu > (csum - eps) / idx
    active[0] = True
    rho = int(np.flatnonzero(active)[-1]) + 1
    theta = (csum[rho - 1] - eps) / rho
    w = np.sign(v) * np.maximum(a - theta, 0.0)
    return ProjectionResult(w, float(theta), rho)


def project_l1_columns(V, eps: float = 1.0) -> ProjectionResult:
    """Project every column of ``V`` onto the l1 ball of radius ``eps``."""
    _check_eps(eps)
    V = as_matrix(V, "V")
    m, n = V.shape
    A = np.abs(V)
    mask = A.sum(axis=0) > eps
    W = V.copy()
    theta = np.zeros(n)
    rho = np.zeros(n, dtype=np.int64)
    if not mask.any():
        return ProjectionResult(W, theta, rho)

    U = np.sort(A[:, mask], axis=0, kind="stable")[::-1]
    csum = np.cumsum(U, axis=0)
    idx = np.arange(1, m + 1)[:, None]
    active = U > (csum - eps) / idx
    # the condition holds on a prefix and always at row 0 (exactly, if not in floats)
    active[0] = True
    r = m - np.argmax(active[::-1], axis=0)
    th = (csum[r - 1, np.arange(r.size)] - eps) / r
    theta[mask] = th
    rho[mask] = r
    W[:, mask] = np.sign(V[:, mask]) * np.maximum(A[:, mask] - th, 0.0)
    return ProjectionResult(W, theta, rho)


def _segments(V: np.ndarray, d: int) -> np.ndarray:
    # (m, n) -> (d, m/d * n): column j's segment g becomes column g * n + j
    m, n = V.shape
    return V.reshape(m // d, d, n).transpose(1, 0, 2).reshape(d, (m // d) * n)


def _unsegments(S: np.ndarray, m: int, n: int) -> np.ndarray:
    d = S.shape[0]
    return S.reshape(d, m // d, n).transpose(1, 0, 2).reshape(m, n)


def _check_group(m: int, d: int) -> None:
    if d <= 0 or m % d:
        raise ConfigError(f"group size {d} must divide the column length {m}")


def project_l1_grouped(V, group_size: int, eps: float = 1.0) -> ProjectionResult:
    """Project each contiguous length-``group_size`` segment of every column.

    ``theta`` and ``rho`` come back with shape ``(m // group_size, n)``.
    """
    V = as_matrix(V, "V")
    m, n = V.shape
    _check_group(m, group_size)
    res = project_l1_columns(_segments(V, group_size), eps)
    g = m // group_size
    return ProjectionResult(
        _unsegments(res.w, m, n),
        res.theta.reshape(g, n),
        res.rho.reshape(g, n),
    )


def prox_linf_columns(V, t: float) -> np.ndarray:
    """Column-wise ``argmin_x 0.5 ||x - v||^2 + t ||x||_inf``."""
    if not t > 0:
        raise ConfigError(f"t must be positive, got {t}")
    V = as_matrix(V, "V")
    m, n = V.shape
    A = np.abs(V)
    if V.size == 0 or t < _TINY_STEP * A.max():
        return V.copy()
    out = np.zeros_like(V)
    # columns with ||v||_1 <= t map to zero
    mask = A.sum(axis=0) > t
    if not mask.any():
        return out
    U = np.sort(A[:, mask], axis=0, kind="stable")[::-1]
    csum = np.cumsum(U, axis=0)
    idx = np.arange(1, m + 1)[:, None]
    active = U > (csum - t) / idx
    # row 0 is active in exact arithmetic; t below one ulp of u_1 would say otherwise
    active[0] = True
    r = m - np.argmax(active[::-1], axis=0)
    radius = (csum[r - 1, np.arange(r.size)] - t) / r
    out[:, mask] = np.clip(V[:, mask], -radius, radius)
    return out


def prox_linf_grouped(V, t: float, group_size: int) -> np.ndarray:
    """Segment-wise l-infinity prox; ``group_size == m`` is the column case."""
    V = as_matrix(V, "V")
    m, n = V.shape
    _check_group(m, group_size)
    if group_size == m:
        return prox_linf_columns(V, t)
    return _unsegments(prox_linf_columns(_segments(V, group_size), t), m, n)


def linf_norms(W: np.ndarray, group_size: int | None = None) -> np.ndarray:
    """Max magnitude per column, or per segment with shape ``(m // d, n)``."""
    W = as_matrix(W, "W")
    m, n = W.shape
    if group_size is None or group_size == m:
        return np.abs(W).max(axis=0) if m else np.zeros(n)
    _check_group(m, group_size)
    return np.abs(W).reshape(m // group_size, group_size, n).max(axis=1)
