"""MagR preprocessing: proximal gradient descent on

    0.5 * trace((W - W_hat)^T H (W - W_hat)) + alpha * sum_j ||w_j||_inf

with the penalty taken per column (per-channel) or per contiguous column
segment (per-group). The quadratic term is the layer reconstruction error
``0.5 * ||X W - X W_hat||_F^2`` written with ``H = X^T X``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError
from .prox import linf_norms, prox_linf_grouped
from .tensor import as_matrix, power_iteration

DEFAULT_ALPHA_CHANNEL = 1e-3
DEFAULT_ALPHA_GROUP = 1e-4
DEFAULT_ITERS = 150
STEP_SAFETY = 1.01


@dataclass(frozen=True)
class MagRConfig:
    """Hyperparameters for one preprocessing run.

    ``group_size`` of ``None`` means per-channel. ``step`` of ``None`` selects
    the automatic step ``1 / (1.01 * lambda_max(H))``.
    """

    alpha: float = DEFAULT_ALPHA_CHANNEL
    max_iter: int = DEFAULT_ITERS
    group_size: int | None = None
    step: float | None = None

    def __post_init__(self):
        if not (self.alpha > 0 and math.isfinite(self.alpha)):
            raise ConfigError(f"alpha must be positive, got {self.alpha}")
        if self.max_iter < 1:
            raise ConfigError(f"max_iter must be >= 1, got {self.max_iter}")
        if self.group_size is not None and self.group_size < 1:
            raise ConfigError(f"group_size must be >= 1, got {self.group_size}")
        if self.step is not None and not self.step > 0:
            raise ConfigError(f"explicit step must be positive, got {self.step}")

    @classmethod
    def for_granularity(cls, group_size: int | None = None, **kw) -> "MagRConfig":
        """Config with the default alpha for per-channel or per-group use."""
        kw.setdefault(
            "alpha", DEFAULT_ALPHA_CHANNEL if not group_size else DEFAULT_ALPHA_GROUP
        )
        return cls(group_size=group_size or None, **kw)


@dataclass
class MagRReport:
    objective_trace: np.ndarray
    max_mag_before: np.ndarray
    max_mag_after: np.ndarray
    output_drift: float
    channel_drift: np.ndarray
    step: float
    lambda_max: float
    iterations: int = field(default=0)


def _group(cfg: MagRConfig, m: int) -> int:
    d = cfg.group_size or m
    if m % d:
        raise ConfigError(f"group size {d} does not divide the row count {m}")
    return d


def _check_shapes(W: np.ndarray, H: np.ndarray) -> None:
    m = W.shape[0]
    if H.shape != (m, m):
        raise DataError(f"H has shape {H.shape}, expected ({m}, {m})")


def objective_value(W, W_hat, H, alpha: float, group_size: int | None = None) -> float:
    """Value of the regularized reconstruction objective."""
    W = as_matrix(W, "W")
    W_hat = as_matrix(W_hat, "W_hat")
    H = as_matrix(H, "H")
    if W.shape != W_hat.shape:
        raise DataError(f"W {W.shape} and W_hat {W_hat.shape} differ in shape")
    _check_shapes(W, H)
    D = W - W_hat
    return 0.5 * float(np.sum(D * (H @ D))) + alpha * float(linf_norms(W, group_size).sum())


def check_psd(H: np.ndarray, lam_max: float, rel_tol: float = 1e-8) -> None:
    """Raise ``DataError`` if H is visibly asymmetric or indefinite."""
    if not np.allclose(H, H.T, rtol=0.0, atol=1e-12 * max(lam_max, 1.0)):
        raise DataError("H is not symmetric")
    if lam_max == 0.0:
        if np.any(H):
            raise DataError("H has no positive eigenvalue")
        return
    if np.min(np.diag(H)) < -rel_tol * lam_max:
        raise DataError("H has a negative diagonal entry")
    # H + tol * lam_max * I is positive definite iff no eigenvalue lies below -tol * lam_max
    try:
        np.linalg.cholesky(H + rel_tol * lam_max * np.eye(H.shape[0]))
    except np.linalg.LinAlgError:
        raise DataError("H is not positive semidefinite") from None


def magr_preprocess(
    W_hat, H, cfg: MagRConfig | None = None
) -> tuple[np.ndarray, MagRReport]:
    """Run ``cfg.max_iter`` proximal gradient steps starting from ``W_hat``."""
    cfg = cfg or MagRConfig()
    W_hat = as_matrix(W_hat, "W_hat")
    H = as_matrix(H, "H")
    _check_shapes(W_hat, H)
    m, n = W_hat.shape
    d = _group(cfg, m)

    lam = power_iteration(H, tol=1e-10).lambda_max
    check_psd(H, lam)
    if cfg.step is not None:
        eta = cfg.step
    else:
        eta = 1.0 / (STEP_SAFETY * lam) if lam > 0 else 1.0
    if not eta > 0:
        raise ConfigError(f"step size must be positive, got {eta}")
    t = eta * cfg.alpha

    W = W_hat.copy()
    trace = np.empty(cfg.max_iter + 1)
    for k in range(cfg.max_iter):
        G = H @ (W - W_hat)
        trace[k] = 0.5 * float(np.sum((W - W_hat) * G)) + cfg.alpha * float(
            linf_norms(W, d).sum()
        )
        W = prox_linf_grouped(W - eta * G, t, d)
    D = W - W_hat
    HD = H @ D
    per_col = np.maximum(np.sum(D * HD, axis=0), 0.0)
    trace[-1] = 0.5 * float(per_col.sum()) + cfg.alpha * float(linf_norms(W, d).sum())

    report = MagRReport(
        objective_trace=trace,
        max_mag_before=linf_norms(W_hat, d),
        max_mag_after=linf_norms(W, d),
        output_drift=math.sqrt(float(per_col.sum())),
        channel_drift=np.sqrt(per_col),
        step=eta,
        lambda_max=lam,
        iterations=cfg.max_iter,
    )
    return W, report
