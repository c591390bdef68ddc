"""Dense matrix helpers, spectral utilities and the MAGR tensor file format.

Matrices are plain ``numpy.ndarray`` objects of dtype float64 in C order.
Everything here is a pure function of its inputs.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import (
    BadMagicError,
    CapacityError,
    DataError,
    DimsMismatchError,
    NonFiniteError,
    TruncatedPayloadError,
    UnsupportedDtypeError,
    UnsupportedVersionError,
)

MAGIC = b"MAGR"
VERSION = 1
DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}

# 2 GiB of float64 for a Gram matrix
DEFAULT_GRAM_CAP_BYTES = 2 * 1024**3

DEFAULT_SEED = 0


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Return ``a`` as a finite, C-contiguous 2-D float64 array."""
    m = np.ascontiguousarray(a, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(-1, 1)
    if m.ndim != 2:
        raise DataError(f"{name} must be 1-D or 2-D, got shape {m.shape}")
    if m.size and not np.all(np.isfinite(m)):
        raise DataError(f"{name} contains NaN or Inf")
    return m


def symmetrize(h: np.ndarray) -> np.ndarray:
    return 0.5 * (h + h.T)


def gram(x, max_bytes: int = DEFAULT_GRAM_CAP_BYTES) -> np.ndarray:
    """Hessian ``XᵀX`` of a feature matrix, symmetrized exactly."""
    x = as_matrix(x, "X")
    if x.size == 0:
        raise DataError("X is empty")
    m = x.shape[1]
    if m * m * 8 > max_bytes:
        raise CapacityError(f"Gram matrix {m}x{m} exceeds the {max_bytes}-byte cap")
    return symmetrize(x.T @ x)


@dataclass(frozen=True)
class SpectralEstimate:
    lambda_max: float
    iterations_used: int
    converged: bool


def power_iteration(
    h,
    tol: float = 1e-10,
    max_iter: int = 10_000,
    seed: int = DEFAULT_SEED,
) -> SpectralEstimate:
    """Largest eigenvalue of a symmetric PSD matrix by power iteration.

    Stops when the Rayleigh quotient changes by at most ``tol`` relative to
    its current value. The start vector is drawn from ``seed``.
    """
    h = as_matrix(h, "H")
    if h.shape[0] != h.shape[1]:
        raise DataError(f"H must be square, got {h.shape}")
    if tol <= 0:
        raise ValueError("tol must be positive")
    n = h.shape[0]
    if n == 0 or not np.any(h):
        return SpectralEstimate(0.0, 0, True)

    x = np.random.default_rng(seed).standard_normal(n)
    x /= np.linalg.norm(x)
    lam = float(x @ h @ x)
    for it in range(1, max_iter + 1):
        y = h @ x
        ny = np.linalg.norm(y)
        if ny == 0.0:
            # start vector landed in the kernel; H is nonzero so restart
            x = np.random.default_rng(seed + it).standard_normal(n)
            x /= np.linalg.norm(x)
            continue
        x = y / ny
        new = float(x @ h @ x)
        if abs(new - lam) <= tol * abs(new):
            return SpectralEstimate(max(new, 0.0), it, True)
        lam = new
    return SpectralEstimate(max(lam, 0.0), max_iter, False)


def step_size(h, safety: float = 1.01, **kwargs) -> float:
    """Step ``1 / (safety * lambda_max(H))``; 1.0 when H is zero."""
    lam = power_iteration(h, **kwargs).lambda_max
    if lam == 0.0:
        return 1.0
    return 1.0 / (safety * lam)


def _round_robin(n: int) -> list[list[tuple[int, int]]]:
    # circle method: n-1 rounds of n/2 disjoint pairs (n even)
    players = list(range(n))
    rounds = []
    for _ in range(n - 1):
        pairs = [(players[i], players[n - 1 - i]) for i in range(n // 2)]
        rounds.append([(min(p, q), max(p, q)) for p, q in pairs])
        players = [players[0], players[-1], *players[1:-1]]
    return rounds


def jacobi_eigh(
    a, tol: float = 1e-14, max_sweeps: int = 100
) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Each sweep visits every off-diagonal pair once, in round-robin order so
    that the n/2 rotations of a round touch disjoint rows and can be applied
    together. Returns ``(eigenvalues, eigenvectors)`` with eigenvalues in
    ascending order and eigenvectors as columns.
    """
    a = as_matrix(a, "A")
    n = a.shape[0]
    if a.shape != (n, n):
        raise DataError(f"matrix must be square, got {a.shape}")
    if n == 0:
        return np.zeros(0), np.zeros((0, 0))
    if n == 1:
        return a[0].copy(), np.ones((1, 1))

    size = n + (n % 2)
    work = np.zeros((size, size))
    work[:n, :n] = symmetrize(a)
    v = np.eye(size)
    rounds = [np.array(r).T for r in _round_robin(size)]

    scale = np.linalg.norm(work)
    if scale == 0.0:
        return np.zeros(n), np.eye(n)
    for _ in range(max_sweeps):
        off = np.linalg.norm(work - np.diag(np.diag(work)))
        if off <= tol * scale:
            break
        for p, q in rounds:
            apq = work[p, q]
            app = work[p, p]
            aqq = work[q, q]
            nz = apq != 0.0
            c = np.ones_like(apq)
            s = np.zeros_like(apq)
            if np.any(nz):
                theta = (aqq[nz] - app[nz]) / (2.0 * apq[nz])
                t = np.sign(theta) / (np.abs(theta) + np.hypot(theta, 1.0))
                t[theta == 0.0] = 1.0
                c[nz] = 1.0 / np.sqrt(t * t + 1.0)
                s[nz] = t * c[nz]
            cc = c[:, None]
            ss = s[:, None]
            rp = work[p, :].copy()
            rq = work[q, :]
            work[p, :] = cc * rp - ss * rq
            work[q, :] = ss * rp + cc * rq
            cp = work[:, p].copy()
            cq = work[:, q]
            work[:, p] = cp * c - cq * s
            work[:, q] = cp * s + cq * c
            vp = v[:, p].copy()
            vq = v[:, q]
            v[:, p] = vp * c - vq * s
            v[:, q] = vp * s + vq * c

    evals = np.diag(work)[:n].copy()
    evecs = v[:n, :n]
    order = np.argsort(evals, kind="stable")
    return evals[order], evecs[:, order]


def singular_values(x) -> np.ndarray:
    """Singular values (descending) via Jacobi on the smaller Gram matrix."""
    x = as_matrix(x, "X")
    g = x.T @ x if x.shape[1] <= x.shape[0] else x @ x.T
    evals, _ = jacobi_eigh(symmetrize(g))
    return np.sqrt(np.clip(evals, 0.0, None))[::-1]


def fraction_rank(x, rel_threshold: float = 0.01) -> float:
    """Share of singular values above ``rel_threshold * sigma_max``."""
    x = as_matrix(x, "X")
    if x.size == 0:
        raise DataError("X is empty")
    if not 0.0 < rel_threshold < 1.0:
        raise ValueError("rel_threshold must lie in (0, 1)")
    sv = singular_values(x)
    smax = sv[0]
    if smax == 0.0:
        return 0.0
    return int(np.count_nonzero(sv > rel_threshold * smax)) / min(x.shape)


# --- MAGR file format -------------------------------------------------------

_HEADER = struct.Struct("<4sIBB")


@dataclass(frozen=True)
class TensorHeader:
    version: int
    dtype: np.dtype
    shape: tuple[int, ...]

    @property
    def nbytes(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64)) * self.dtype.itemsize


def _parse_header(buf: bytes) -> tuple[TensorHeader, int]:
    if len(buf) < _HEADER.size:
        if not MAGIC.startswith(buf[:4]):
            raise BadMagicError("bad magic")
        raise TruncatedPayloadError("file shorter than the fixed header")
    magic, version, dtype_code, ndim = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported version {version}")
    if dtype_code not in DTYPE_CODES:
        raise UnsupportedDtypeError(f"unsupported dtype code {dtype_code}")
    if ndim not in (1, 2):
        raise DimsMismatchError(f"ndim must be 1 or 2, got {ndim}")
    off = _HEADER.size
    if len(buf) < off + 8 * ndim:
        raise TruncatedPayloadError("file ends inside the dims block")
    shape = struct.unpack_from(f"<{ndim}Q", buf, off)
    off += 8 * ndim
    return TensorHeader(version, DTYPE_CODES[dtype_code], tuple(shape)), off


def read_header(path: str | os.PathLike) -> TensorHeader:
    with open(path, "rb") as f:
        head = f.read(_HEADER.size + 16)
    return _parse_header(head)[0]


def decode_tensor(buf: bytes) -> tuple[np.ndarray, TensorHeader]:
    header, off = _parse_header(buf)
    payload = len(buf) - off
    if payload < header.nbytes:
        raise TruncatedPayloadError(
            f"payload has {payload} bytes, dims {header.shape} need {header.nbytes}"
        )
    if payload > header.nbytes:
        raise DimsMismatchError(
            f"payload has {payload} bytes, dims {header.shape} need {header.nbytes}"
        )
    data = np.frombuffer(buf, dtype=header.dtype, count=int(np.prod(header.shape)), offset=off)
    data = data.astype(np.float64).reshape(header.shape)
    if not np.all(np.isfinite(data)):
        raise NonFiniteError("tensor contains NaN or Inf")
    return data, header


def read_tensor(path: str | os.PathLike) -> np.ndarray:
    """Load a MAGR tensor file as float64, keeping its 1-D or 2-D shape."""
    with open(path, "rb") as f:
        buf = f.read()
    return decode_tensor(buf)[0]


def encode_tensor(a, dtype=np.float64) -> bytes:
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim not in (1, 2):
        raise DataError(f"only 1-D and 2-D tensors are supported, got ndim={arr.ndim}")
    dt = np.dtype(dtype).newbyteorder("<")
    codes = {v: k for k, v in DTYPE_CODES.items()}
    if dt not in codes:
        raise UnsupportedDtypeError(f"unsupported dtype {dtype}")
    out = arr.astype(dt)
    head = _HEADER.pack(MAGIC, VERSION, codes[dt], arr.ndim)
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + dims + np.ascontiguousarray(out).tobytes()


def write_tensor(path: str | os.PathLike, a, dtype=np.float64) -> None:
    with open(path, "wb") as f:
        f.write(encode_tensor(a, dtype))
