"""Multi-layer orchestration: MagR, quantization, feature propagation, reports."""

from __future__ import annotations

import csv
import io
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, PipelineError
from .magr import MagRConfig, MagRReport, magr_preprocess
from .prox import linf_norms
from .quant import QuantConfig, QuantizedLayer, layer_error, quantize_layer, rtn_quantize
from .tensor import as_matrix, fraction_rank, gram, read_tensor, symmetrize

REPORT_COLUMNS = (
    "layer",
    "frac_rank",
    "maxmag_before",
    "maxmag_after",
    "drift",
    "err_rtn_raw",
    "err_method_magr",
    "seconds",
)


@dataclass
class LayerRecord:
    """Pre-trained weights ``W_hat`` (m x n) with features X or Hessian H."""

    name: str
    W_hat: np.ndarray
    features: np.ndarray | None = None
    hessian: np.ndarray | None = None

    def __post_init__(self):
        self.W_hat = as_matrix(self.W_hat, f"{self.name}: W_hat")
        if self.features is not None:
            self.features = as_matrix(self.features, f"{self.name}: X")
        if self.hessian is not None:
            self.hessian = as_matrix(self.hessian, f"{self.name}: H")
        self.validate()

    @property
    def m(self) -> int:
        return self.W_hat.shape[0]

    def validate(self) -> None:
        if (self.features is None) == (self.hessian is None):
            raise PipelineError(self.name, "exactly one of features or hessian is required")
        if self.features is not None and self.features.shape[1] != self.m:
            raise PipelineError(
                self.name, f"X has {self.features.shape[1]} columns, W_hat has {self.m} rows"
            )
        if self.hessian is not None and self.hessian.shape != (self.m, self.m):
            raise PipelineError(self.name, f"H has shape {self.hessian.shape}, expected {(self.m,) * 2}")

    def hessian_matrix(self) -> np.ndarray:
        if self.hessian is not None:
            return symmetrize(self.hessian)
        return gram(self.features)


@dataclass
class LayerResult:
    name: str
    frac_rank: float | None
    maxmag_before: np.ndarray
    maxmag_after: np.ndarray
    drift: float
    err_rtn_raw: float
    err_method_raw: float | None
    err_method_magr: float
    magr: MagRReport | None
    seconds: dict = field(default_factory=dict)

    def row(self, timings: bool = False) -> dict:
        return {
            "layer": self.name,
            "frac_rank": "" if self.frac_rank is None else repr(self.frac_rank),
            "maxmag_before": repr(float(np.mean(self.maxmag_before))),
            "maxmag_after": repr(float(np.mean(self.maxmag_after))),
            "drift": repr(self.drift),
            "err_rtn_raw": repr(self.err_rtn_raw),
            "err_method_magr": repr(self.err_method_magr),
            "seconds": f"{sum(self.seconds.values()):.6f}" if timings else "0",
        }


@dataclass
class RunReport:
    layers: list[LayerResult]
    magr_enabled: bool
    method: str
    bits: int

    def to_csv(self, timings: bool = False) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
        w.writeheader()
        for layer in self.layers:
            w.writerow(layer.row(timings))
        return buf.getvalue()

    def write_csv(self, path: str | os.PathLike, timings: bool = False) -> None:
        with open(path, "w", newline="") as f:
            f.write(self.to_csv(timings))

    def maxmag_table(self) -> str:
        """Per-channel max magnitude before and after MagR, one row per channel."""
        lines = ["layer,channel,maxmag_before,maxmag_after"]
        for layer in self.layers:
            before = np.ravel(layer.maxmag_before)
            after = np.ravel(layer.maxmag_after)
            for j, (b, a) in enumerate(zip(before, after)):
                lines.append(f"{layer.name},{j},{b!r},{a!r}")
        return "\n".join(lines) + "\n"

    def summary(self) -> str:
        errs = [layer.err_method_magr for layer in self.layers]
        rtn = [layer.err_rtn_raw for layer in self.layers]
        lines = [
            f"layers: {len(self.layers)}",
            f"method: {self.method}  bits: {self.bits}  magr: {'on' if self.magr_enabled else 'off'}",
            f"mean layer error (method{' + MagR' if self.magr_enabled else ''}): {np.mean(errs):.6g}",
            f"mean layer error (RTN, raw weights): {np.mean(rtn):.6g}",
        ]
        if self.magr_enabled:
            red = [
                float(np.median(1.0 - layer.maxmag_after / np.where(layer.maxmag_before == 0, 1, layer.maxmag_before)))
                for layer in self.layers
            ]
            lines.append(f"median max-magnitude reduction per layer: {', '.join(f'{r:.2%}' for r in red)}")
        return "\n".join(lines) + "\n"


def _process(
    name: str,
    W_hat: np.ndarray,
    H: np.ndarray,
    X: np.ndarray | None,
    magr: MagRConfig | None,
    quant: QuantConfig,
    compare_raw: bool,
    analyze: bool = True,
) -> tuple[QuantizedLayer, LayerResult]:
    seconds = {}
    t0 = time.perf_counter()
    fr = fraction_rank(X) if X is not None and analyze else None
    seconds["analyze"] = time.perf_counter() - t0

    d = quant.group_size or W_hat.shape[0]
    report = None
    W = W_hat
    try:
        if magr is not None:
            t0 = time.perf_counter()
            W, report = magr_preprocess(W_hat, H, magr)
            seconds["magr"] = time.perf_counter() - t0
        t0 = time.perf_counter()
        q = quantize_layer(W, H, quant)
        seconds["quantize"] = time.perf_counter() - t0
    except PipelineError:
        raise
    except DataError as e:
        raise PipelineError(name, str(e)) from e

    rtn_raw = rtn_quantize(W_hat, quant)
    err_method_raw = None
    if magr is None:
        err_method_raw = layer_error(q.dequantized, W_hat, H)
    elif compare_raw:
        err_method_raw = layer_error(quantize_layer(W_hat, H, quant).dequantized, W_hat, H)

    before = linf_norms(W_hat, d)
    result = LayerResult(
        name=name,
        frac_rank=fr,
        maxmag_before=before,
        maxmag_after=linf_norms(W, d) if magr is not None else before,
        drift=report.output_drift if report is not None else 0.0,
        err_rtn_raw=layer_error(rtn_raw.dequantized, W_hat, H),
        err_method_raw=err_method_raw,
        err_method_magr=layer_error(q.dequantized, W_hat, H),
        magr=report,
        seconds=seconds,
    )
    return q, result


def run_pipeline(
    layers: list[LayerRecord],
    magr: MagRConfig | None,
    quant: QuantConfig,
    propagate: bool = False,
    workers: int = 1,
    compare_raw: bool = False,
    analyze: bool = True,
) -> tuple[list[QuantizedLayer], RunReport]:
    """MagR (optional) then quantization for each layer, in order.

    With ``propagate`` the layers form a linear chain: only the first layer's
    features are used, and each later layer sees the previous activations
    multiplied by the previous layer's dequantized weights. ``compare_raw``
    also quantizes the unprocessed weights with the configured method;
    ``analyze`` computes the fraction rank of each layer's features.
    """
    if not layers:
        raise DataError("no layers given")
    names = [rec.name for rec in layers]
    if len(set(names)) != len(names):
        raise DataError("layer names must be unique")

    if propagate:
        first = layers[0]
        if first.features is None:
            raise PipelineError(first.name, "propagation needs features for the first layer")
        X = first.features
        out, results = [], []
        for rec in layers:
            if X.shape[1] != rec.m:
                raise PipelineError(
                    rec.name, f"incoming activations have {X.shape[1]} columns, W_hat has {rec.m} rows"
                )
            try:
                H = gram(X)
            except DataError as e:
                raise PipelineError(rec.name, str(e)) from e
            q, res = _process(rec.name, rec.W_hat, H, X, magr, quant, compare_raw, analyze)
            out.append(q)
            results.append(res)
            X = X @ q.dequantized
    else:

        def job(rec: LayerRecord):
            try:
                H = rec.hessian_matrix()
            except DataError as e:
                raise PipelineError(rec.name, str(e)) from e
            return _process(rec.name, rec.W_hat, H, rec.features, magr, quant, compare_raw, analyze)

        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                pairs = list(pool.map(job, layers))
        else:
            pairs = [job(rec) for rec in layers]
        out = [p[0] for p in pairs]
        results = [p[1] for p in pairs]

    report = RunReport(results, magr is not None, quant.method.value, quant.bits)
    return out, report


# --- synthetic layers -------------------------------------------------------

SIGMA_TAIL = 1e-3
SIGMA_HEAD_MIN = 0.05
OUTLIER_SCALE = 10.0


def _orthonormal(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((rows, cols)))
    return q * np.sign(np.diag(r))


def synth_features(
    samples: int, m: int, frac_rank_target: float, rng: np.random.Generator
) -> np.ndarray:
    """``U diag(s) V^T`` with exactly ``ceil(target * min(samples, m))``
    singular values above 1% of the largest (which is 1)."""
    if not 0.0 < frac_rank_target <= 1.0:
        raise DataError(f"frac_rank_target must lie in (0, 1], got {frac_rank_target}")
    r = min(samples, m)
    k = max(1, math.ceil(round(frac_rank_target * r, 9)))
    s = np.full(r, SIGMA_TAIL)
    s[:k] = np.geomspace(1.0, SIGMA_HEAD_MIN, k) if k > 1 else 1.0
    U = _orthonormal(rng, samples, r)
    V = _orthonormal(rng, m, r)
    return (U * s) @ V.T


def synth_weights(m: int, n: int, outlier_rate: float, rng: np.random.Generator) -> np.ndarray:
    """Gaussian with std ``1/(sqrt(m) + sqrt(n))`` (spectral norm near 1, so
    activations keep their scale along a chain); a random ``outlier_rate``
    share of entries is scaled up tenfold."""
    W = rng.standard_normal((m, n)) / (math.sqrt(m) + math.sqrt(n))
    count = int(round(outlier_rate * m * n))
    if count:
        idx = rng.choice(m * n, size=count, replace=False)
        W.flat[idx] *= OUTLIER_SCALE
    return W


def synth_layer(
    m: int,
    n: int,
    samples: int,
    frac_rank_target: float,
    outlier_rate: float,
    seed: int,
    name: str | None = None,
) -> LayerRecord:
    """Deterministic test layer with approximately rank-deficient features."""
    rng = np.random.default_rng(seed)
    X = synth_features(samples, m, frac_rank_target, rng)
    W = synth_weights(m, n, outlier_rate, rng)
    return LayerRecord(name or f"layer{seed}", W, features=X)


def synth_chain(
    n_layers: int,
    m: int,
    n: int,
    samples: int,
    frac_rank_target: float,
    outlier_rate: float,
    seed: int,
) -> list[LayerRecord]:
    """Linear chain: layer 0 is ``m x n``, later layers ``n x n``; each layer's
    features are the previous layer's full-precision outputs."""
    rng = np.random.default_rng(seed)
    X = synth_features(samples, m, frac_rank_target, rng)
    records = []
    rows = m
    for i in range(n_layers):
        W = synth_weights(rows, n, outlier_rate, rng)
        records.append(LayerRecord(f"layer{i}", W, features=X))
        X = X @ W
        rows = n
    return records


# --- manifests --------------------------------------------------------------


def parse_manifest(path: str | os.PathLike) -> list[tuple[str, dict[str, str]]]:
    """Lines of ``name, w=<path>, x=<path>|h=<path>``; paths relative to the file."""
    base = os.path.dirname(os.path.abspath(path))
    entries = []
    with open(path) as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            fields = [p.strip() for p in line.split(",")]
            name, kv = fields[0], {}
            for item in fields[1:]:
                key, sep, value = item.partition("=")
                if not sep or key not in ("w", "x", "h") or not value:
                    raise DataError(f"{path}:{lineno}: bad field {item!r}")
                kv[key] = value if os.path.isabs(value) else os.path.join(base, value)
            if not name or "w" not in kv or (("x" in kv) == ("h" in kv)):
                raise DataError(f"{path}:{lineno}: need a name, w=, and exactly one of x=/h=")
            entries.append((name, kv))
    if not entries:
        raise DataError(f"{path}: manifest lists no layers")
    return entries


def load_manifest(path: str | os.PathLike) -> list[LayerRecord]:
    records = []
    for name, kv in parse_manifest(path):
        try:
            W = as_matrix(read_tensor(kv["w"]), "W")
            X = as_matrix(read_tensor(kv["x"]), "X") if "x" in kv else None
            H = as_matrix(read_tensor(kv["h"]), "H") if "h" in kv else None
        except DataError as e:
            raise PipelineError(name, str(e)) from e
        records.append(LayerRecord(name, W, features=X, hessian=H))
    return records


def write_manifest(path: str | os.PathLike, rows: list[tuple[str, str, str, str]]) -> None:
    """``rows`` are ``(name, w_path, kind, other_path)`` with kind ``x`` or ``h``."""
    with open(path, "w") as f:
        for name, w, kind, other in rows:
            f.write(f"{name}, w={w}, {kind}={other}\n")
