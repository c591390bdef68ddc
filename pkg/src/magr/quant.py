"""Asymmetric uniform weight quantizer and three layer quantizers.

Weights are ``m x n`` with one output channel per column. A grid is shared by
a whole column (``group_size == 0``) or by each contiguous run of
``group_size`` rows inside a column. For a group with values ``w``::

    delta = beta * (max(w) - min(w)) / (2**bits - 1)
    z     = round(min(w) / delta)
    code  = clamp(round(w / delta) - z, 0, 2**bits - 1)
    w_q   = delta * (code + z)

``round`` is round-half-away-from-zero throughout.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .errors import ConfigError, DataError
from .tensor import as_matrix, read_tensor, write_tensor


class Method(str, Enum):
    RTN = "rtn"
    OPTQ = "optq"
    OPTQ_CD = "optq_cd"


def round_half_away(x):
    """Round to nearest integer, ties away from zero (exact for all floats)."""
    x = np.asarray(x, dtype=np.float64)
    a = np.abs(x)
    f = np.floor(a)
    return np.copysign(f + (a - f >= 0.5), x)


def default_beta(bits: int, group_size: int = 0) -> float:
    if bits == 4:
        return 1.0
    if group_size and bits in (2, 3):
        return 0.95
    if bits == 3:
        return 0.9
    if bits == 2:
        return 0.8
    return 1.0


@dataclass(frozen=True)
class QuantConfig:
    bits: int = 4
    group_size: int = 0
    beta: float | None = None
    method: Method = Method.RTN
    cd_iters: int = 30
    optq_damp: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        if not 1 <= self.bits <= 16:
            raise ConfigError(f"bits must lie in [1, 16], got {self.bits}")
        if self.group_size < 0:
            raise ConfigError(f"group_size must be >= 0, got {self.group_size}")
        if self.beta is None:
            object.__setattr__(self, "beta", default_beta(self.bits, self.group_size))
        if not 0.0 < self.beta <= 1.0:
            raise ConfigError(f"beta must lie in (0, 1], got {self.beta}")
        if self.cd_iters < 0:
            raise ConfigError(f"cd_iters must be >= 0, got {self.cd_iters}")
        if self.optq_damp < 0:
            raise ConfigError(f"optq_damp must be >= 0, got {self.optq_damp}")

    @property
    def levels(self) -> int:
        return 2**self.bits - 1

    def group_for(self, m: int) -> int:
        g = self.group_size or m
        if m % g:
            raise ConfigError(f"group size {g} does not divide the channel length {m}")
        return g


@dataclass
class QuantizedLayer:
    """Integer codes plus the per-group grid.

    ``delta``, ``zero`` and ``offset`` have shape ``(m // group_size, n)``.
    ``offset`` is nonzero only for constant groups (``delta == 0``), whose
    value is carried there instead of through the grid.
    """

    codes: np.ndarray
    delta: np.ndarray
    zero: np.ndarray
    offset: np.ndarray
    bits: int
    group_size: int
    beta: float
    method: str = Method.RTN.value
    meta: dict = field(default_factory=dict)

    @property
    def shape(self) -> tuple[int, int]:
        return self.codes.shape

    @property
    def degenerate(self) -> np.ndarray:
        return self.delta == 0.0

    def expand(self, a: np.ndarray) -> np.ndarray:
        return np.repeat(a, self.group_size, axis=0)

    @property
    def dequantized(self) -> np.ndarray:
        d = self.expand(self.delta)
        return d * (self.codes + self.expand(self.zero)) + self.expand(self.offset)

    def with_codes(self, codes: np.ndarray, method: str | None = None) -> "QuantizedLayer":
        return replace(self, codes=codes, method=method or self.method, meta=dict(self.meta))


def quantize_vector(w, bits: int, beta: float = 1.0):
    """Quantize one group. Returns ``(codes, delta, z, dequantized)``.

    A constant group gets ``delta = 0``, ``z = 0``, all-zero codes and
    dequantizes to the constant itself.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.size == 0:
        raise DataError("cannot quantize an empty vector")
    codes, delta, zero, offset = _fit_grid(w.reshape(-1, 1), bits, beta)
    d, z, o = float(delta[0]), int(zero[0]), float(offset[0])
    deq = d * (codes[:, 0] + z) + o
    return codes[:, 0].astype(np.int64), d, z, deq


def _fit_grid(G: np.ndarray, bits: int, beta: float):
    # G: (group_len, k) with one group per column
    levels = 2**bits - 1
    lo = G.min(axis=0)
    hi = G.max(axis=0)
    delta = beta * (hi - lo) / levels
    const = delta == 0.0
    safe = np.where(const, 1.0, delta)
    zero = np.where(const, 0.0, round_half_away(lo / safe))
    codes = np.clip(round_half_away(G / safe) - zero, 0, levels)
    codes[:, const] = 0.0
    offset = np.where(const, lo, 0.0)
    return codes, np.where(const, 0.0, delta), zero, offset


def _grouped(W: np.ndarray, g: int) -> np.ndarray:
    # (m, n) -> (g, m/g * n); group k of column j is column k * n + j
    m, n = W.shape
    return W.reshape(m // g, g, n).transpose(1, 0, 2).reshape(g, (m // g) * n)


def fit_grid(W, cfg: QuantConfig) -> QuantizedLayer:
    """RTN codes and the grid computed from ``W``'s group-wise range."""
    W = as_matrix(W, "W")
    m, n = W.shape
    g = cfg.group_for(m)
    codes, delta, zero, offset = _fit_grid(_grouped(W, g), cfg.bits, cfg.beta)
    k = m // g
    codes = codes.reshape(g, k, n).transpose(1, 0, 2).reshape(m, n)
    return QuantizedLayer(
        codes=codes.astype(np.int64),
        delta=delta.reshape(k, n),
        zero=zero.astype(np.int64).reshape(k, n),
        offset=offset.reshape(k, n),
        bits=cfg.bits,
        group_size=g,
        beta=cfg.beta,
        method=Method.RTN.value,
    )


def rtn_quantize(W, cfg: QuantConfig) -> QuantizedLayer:
    """Round-to-nearest, independently per channel or group."""
    return fit_grid(W, cfg)


def _encode(layer: QuantizedLayer, values: np.ndarray, rows: slice) -> np.ndarray:
    # nearest code on the fixed grid for a block of rows
    d = layer.expand(layer.delta)[rows]
    z = layer.expand(layer.zero)[rows]
    safe = np.where(d == 0.0, 1.0, d)
    c = np.clip(round_half_away(values / safe) - z, 0, 2**layer.bits - 1)
    return np.where(d == 0.0, 0.0, c)


def _dampened_inverse_factor(H: np.ndarray, damp: float) -> np.ndarray:
    """Upper Cholesky factor of ``(H + damp * mean(diag H) * I)^-1``."""
    H = H.copy()
    m = H.shape[0]
    dead = np.diag(H) == 0.0
    H[dead, dead] = 1.0
    base = float(np.mean(np.diag(H)))
    lam = damp * base
    for _ in range(4):
        Hd = H + lam * np.eye(m)
        try:
            Linv = np.linalg.inv(np.linalg.cholesky(Hd))
            Hinv = Linv.T @ Linv
            U = np.linalg.cholesky(0.5 * (Hinv + Hinv.T)).T
            if np.all(np.isfinite(U)):
                return U
        except np.linalg.LinAlgError:
            pass
        lam = 10.0 * lam if lam > 0 else 1e-8 * max(base, 1.0)
    raise DataError("Cholesky factorization failed after dampening retries")


def optq_quantize(W_hat, H, cfg: QuantConfig) -> QuantizedLayer:
    """Greedy row-by-row quantization with Hessian error feedback.

    The grid is fixed from ``W_hat`` up front. Row ``i`` is rounded, and its
    error is pushed onto the rows not yet quantized through the upper
    Cholesky factor of the dampened inverse Hessian.
    """
    W_hat = as_matrix(W_hat, "W_hat")
    H = as_matrix(H, "H")
    m, n = W_hat.shape
    if H.shape != (m, m):
        raise DataError(f"H has shape {H.shape}, expected ({m}, {m})")
    layer = fit_grid(W_hat, cfg)
    U = _dampened_inverse_factor(H, cfg.optq_damp)

    W = W_hat.copy()
    codes = np.zeros((m, n))
    dq = layer.expand(layer.delta)
    zq = layer.expand(layer.zero)
    oq = layer.expand(layer.offset)
    for i in range(m):
        row = slice(i, i + 1)
        c = _encode(layer, W[row], row)
        codes[i] = c
        q = dq[i] * (c[0] + zq[i]) + oq[i]
        err = (W[i] - q) / U[i, i]
        W[i + 1 :] -= np.outer(U[i, i + 1 :], err)
    return layer.with_codes(codes.astype(np.int64), Method.OPTQ.value)


def cd_refine(layer: QuantizedLayer, W_hat, H, iters: int = 30) -> QuantizedLayer:
    """Cyclic coordinate descent on the reconstruction error over a fixed grid.

    Each update moves one weight to the grid point closest to its exact
    one-dimensional minimizer and is kept only if it strictly lowers the
    objective. Columns are independent, so a row update covers all of them.
    """
    if iters < 0:
        raise ConfigError("iters must be >= 0")
    W_hat = as_matrix(W_hat, "W_hat")
    H = as_matrix(H, "H")
    m, n = W_hat.shape
    if layer.shape != (m, n) or H.shape != (m, m):
        raise DataError("shape mismatch between layer, W_hat and H")
    if iters == 0:
        return layer

    dq = layer.expand(layer.delta)
    zq = layer.expand(layer.zero)
    oq = layer.expand(layer.offset)
    codes = layer.codes.astype(np.float64)
    D = dq * (codes + zq) + oq - W_hat
    G = H @ D
    hdiag = np.diag(H)
    for _ in range(iters):
        for i in range(m):
            hii = hdiag[i]
            if hii <= 0.0:
                continue
            target = W_hat[i] + D[i] - G[i] / hii
            row = slice(i, i + 1)
            c = _encode(layer, target[None, :], row)[0]
            new = dq[i] * (c + zq[i]) + oq[i]
            step = new - W_hat[i] - D[i]
            gain = hii * step * step + 2.0 * step * G[i]
            take = (gain < 0.0) & (step != 0.0)
            if not take.any():
                continue
            step = np.where(take, step, 0.0)
            codes[i] = np.where(take, c, codes[i])
            D[i] += step
            G += np.outer(H[:, i], step)
    out = layer.with_codes(codes.astype(np.int64), Method.OPTQ_CD.value)
    out.meta["cd_iters"] = iters
    return out


def quantize_layer(W_hat, H, cfg: QuantConfig) -> QuantizedLayer:
    """Dispatch on ``cfg.method``."""
    if cfg.method is Method.RTN:
        return rtn_quantize(W_hat, cfg)
    layer = optq_quantize(W_hat, H, cfg)
    if cfg.method is Method.OPTQ_CD:
        layer = cd_refine(layer, W_hat, H, cfg.cd_iters)
    return layer


def layer_error(W_q, W_ref, H) -> float:
    """Root of ``trace((W_q - W_ref)^T H (W_q - W_ref))``."""
    D = as_matrix(W_q, "W_q") - as_matrix(W_ref, "W_ref")
    H = as_matrix(H, "H")
    if H.shape != (D.shape[0], D.shape[0]):
        raise DataError(f"H has shape {H.shape}, expected {(D.shape[0],) * 2}")
    return float(np.sqrt(max(float(np.sum(D * (H @ D))), 0.0)))


def channel_errors(W_q, W_ref, H) -> np.ndarray:
    """Per-column ``||X (w_q - w_ref)||`` in Hessian form."""
    D = as_matrix(W_q, "W_q") - as_matrix(W_ref, "W_ref")
    return np.sqrt(np.maximum(np.sum(D * (as_matrix(H, "H") @ D), axis=0), 0.0))


# --- serialization ----------------------------------------------------------

_PARTS = ("codes", "delta", "zero", "offset")


def save_quantized(layer: QuantizedLayer, directory: str | os.PathLike, name: str) -> list[str]:
    """Write ``<name>.{codes,delta,zero,offset}.magr`` and ``<name>.meta.txt``."""
    os.makedirs(directory, exist_ok=True)
    paths = []
    for part in _PARTS:
        p = os.path.join(directory, f"{name}.{part}.magr")
        write_tensor(p, getattr(layer, part).astype(np.float64))
        paths.append(p)
    meta = {
        "rows": layer.shape[0],
        "cols": layer.shape[1],
        "bits": layer.bits,
        "group_size": layer.group_size,
        "beta": repr(float(layer.beta)),
        "method": layer.method,
        **layer.meta,
    }
    p = os.path.join(directory, f"{name}.meta.txt")
    with open(p, "w") as f:
        for k, v in meta.items():
            f.write(f"{k}: {v}\n")
    paths.append(p)
    return paths


def load_quantized(directory: str | os.PathLike, name: str) -> QuantizedLayer:
    meta = {}
    with open(os.path.join(directory, f"{name}.meta.txt")) as f:
        for line in f:
            if line.strip():
                k, _, v = line.partition(":")
                meta[k.strip()] = v.strip()
    parts = {
        part: as_matrix(read_tensor(os.path.join(directory, f"{name}.{part}.magr")), part)
        for part in _PARTS
    }
    extra = {k: v for k, v in meta.items() if k not in ("rows", "cols", "bits", "group_size", "beta", "method")}
    layer = QuantizedLayer(
        codes=parts["codes"].astype(np.int64),
        delta=parts["delta"],
        zero=parts["zero"].astype(np.int64),
        offset=parts["offset"],
        bits=int(meta["bits"]),
        group_size=int(meta["group_size"]),
        beta=float(meta["beta"]),
        method=meta["method"],
        meta=extra,
    )
    if layer.shape != (int(meta["rows"]), int(meta["cols"])):
        raise DataError(f"codes shape {layer.shape} disagrees with the sidecar")
    return layer
