"""Evaluation protocol: ground-truth lifetime images, error metrics, timing."""
from __future__ import annotations

import math
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .baselines import InsufficientPhotons, cmm_estimate, nlsf_fit, phasor_lifetime, phasor_transform
from .binning import LogBinSpec, compress_counts
from .decay import DecayParams, InstrumentConfig, record_rng, synthesize_decay, tau_labels
from .network import NetworkModel, forward_batch, forward_fixed_batch

REGIMES = {"high": (1000.0, 5000.0), "mid": (100.0, 1000.0), "low": (10.0, 100.0)}


@dataclass(frozen=True)
class GtImageSpec:
    """Bi-exponential ramp image: row ``y`` has ``a = y / (height - 1)``.

    ``a`` weights ``tau1``, so the top row is pure ``tau2`` and the bottom row
    pure ``tau1``.
    """

    height: int = 256
    width: int = 256
    tau1: float = 0.3
    tau2: float = 2.5
    regime: str | tuple[float, float] = "high"

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ValueError("image dimensions must be >= 1")
        if not 0 < self.tau1 < self.tau2:
            raise ValueError("need 0 < tau1 < tau2")
        lo, hi = self.peak_range
        if not 0 < lo <= hi:
            raise ValueError("photon regime bounds must be positive")

    @property
    def peak_range(self) -> tuple[float, float]:
        return REGIMES[self.regime] if isinstance(self.regime, str) else tuple(self.regime)

    def fraction(self, row: int) -> float:
        return row / (self.height - 1) if self.height > 1 else 0.0


@dataclass
class GtImage:
    spec: GtImageSpec
    params: list[list[DecayParams]]
    labels: np.ndarray  # (H, W, 2)
    counts: np.ndarray  # (H, W, bins)

    def flat_counts(self) -> np.ndarray:
        return self.counts.reshape(-1, self.counts.shape[-1])

    def flat_labels(self) -> np.ndarray:
        return self.labels.reshape(-1, 2)


def gen_gt_image(spec: GtImageSpec, seed: int = 0, cfg: InstrumentConfig | None = None) -> GtImage:
    cfg = cfg or InstrumentConfig()
    H, W = spec.height, spec.width
    params, labels = [], np.empty((H, W, 2))
    counts = np.empty((H, W, cfg.num_bins), dtype=np.int64)
    for y in range(H):
        a = spec.fraction(y)
        row = []
        for x in range(W):
            rng = record_rng(seed, y * W + x)
            p = DecayParams.bi(a, spec.tau1, spec.tau2, rng.uniform(*spec.peak_range))
            counts[y, x] = synthesize_decay(p, cfg, rng).counts
            labels[y, x] = tuple(tau_labels(p))
            row.append(p)
        params.append(row)
    return GtImage(spec, params, labels, counts)


def mse_eval(estimates, gt, mask=None) -> tuple[float, float]:
    """Per-target mean squared error over masked pixels; arrays end in a size-2 axis."""
    est = np.asarray(estimates, dtype=np.float64).reshape(-1, 2)
    ref = np.asarray(gt, dtype=np.float64).reshape(-1, 2)
    if est.shape != ref.shape:
        raise ValueError(f"shape mismatch {est.shape} vs {ref.shape}")
    m = np.ones(len(est), dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(-1)
    if not m.any():
        raise ValueError("empty mask")
    err = (est[m] - ref[m]) ** 2
    return float(err[:, 0].mean()), float(err[:, 1].mean())


def acc_prec_db(estimates, reference: float) -> tuple[float, float | None]:
    """Accuracy ``20 log10(mean / |mean - ref|)`` and precision ``20 log10(mean / std)`` in dB.

    Zero error or zero spread gives ``inf``; precision is ``None`` for a
    single estimate.
    """
    est = np.asarray(estimates, dtype=np.float64).reshape(-1)
    if est.size == 0:
        raise ValueError("no estimates")
    if not reference > 0:
        raise ValueError("reference lifetime must be positive")
    mean = float(est.mean())
    err = abs(mean - reference)
    acc = math.inf if err == 0 else 20.0 * math.log10(mean / err)
    if est.size < 2:
        return acc, None
    sd = float(est.std(ddof=1))
    pre = math.inf if sd == 0 else 20.0 * math.log10(mean / sd)
    return acc, pre


# --------------------------------------------------------------------------
# estimators over count matrices
# --------------------------------------------------------------------------

Estimator = Callable[[np.ndarray], np.ndarray]


def cmm_method(cfg: InstrumentConfig = InstrumentConfig()) -> Estimator:
    def run(counts):
        out = np.full((len(counts), 2), np.nan)
        for i, c in enumerate(counts):
            try:
                out[i] = cmm_estimate(c, cfg)
            except InsufficientPhotons:
                pass
        return out
    return run


def phasor_method(cfg: InstrumentConfig = InstrumentConfig()) -> Estimator:
    def run(counts):
        out = np.full((len(counts), 2), np.nan)
        for i, c in enumerate(counts):
            try:
                p = phasor_transform(c, cfg, calibrate_irf=True)
                out[i] = phasor_lifetime(p, cfg)
            except (InsufficientPhotons, ValueError):
                pass
        return out
    return run


def nlsf_method(cfg: InstrumentConfig = InstrumentConfig(), order: int = 2) -> Estimator:
    def run(counts):
        out = np.full((len(counts), 2), np.nan)
        for i, c in enumerate(counts):
            try:
                out[i] = tuple(nlsf_fit(c, cfg, order).lifetimes)
            except InsufficientPhotons:
                pass
        return out
    return run


def model_method(model: NetworkModel, mode: str = "float", gate: float | None = None) -> Estimator:
    """Network estimator on raw 256-bin counts; compresses first for 80-bin models."""
    edges = None
    if model.input_length != InstrumentConfig().num_bins:
        edges = LogBinSpec(InstrumentConfig().num_bins, model.input_length).edges

    def run(counts):
        x = compress_counts(counts, edges) if edges is not None else counts
        if mode == "fixed":
            return forward_fixed_batch(model, x, gate=gate)
        return forward_batch(model, x, gate=gate)
    return run


@dataclass
class MethodResult:
    method: str
    regime: str
    mse: tuple[float, float]
    n_pixels: int
    n_failed: int
    estimates: np.ndarray = field(repr=False)

    @property
    def rmse(self) -> tuple[float, float]:
        return math.sqrt(self.mse[0]), math.sqrt(self.mse[1])


def run_chunked(fn: Estimator, counts: np.ndarray, workers: int = 1, chunk: int = 256) -> np.ndarray:
    """Apply an estimator over row chunks on a thread pool; output order is preserved."""
    counts = np.asarray(counts)
    if workers <= 1 or len(counts) <= chunk:
        return np.asarray(fn(counts), dtype=np.float64)
    parts = [counts[i:i + chunk] for i in range(0, len(counts), chunk)]
    with ThreadPoolExecutor(workers) as pool:
        return np.concatenate([np.asarray(p, dtype=np.float64) for p in pool.map(fn, parts)])


def evaluate_image(image: GtImage, methods: dict[str, Estimator], workers: int = 1) -> list[MethodResult]:
    """Run every estimator on every pixel; pixels an estimator refuses are excluded and counted."""
    counts = image.flat_counts()
    labels = image.flat_labels()
    regime = image.spec.regime if isinstance(image.spec.regime, str) else "custom"
    out = []
    for name, fn in methods.items():
        est = run_chunked(fn, counts, workers)
        ok = np.all(np.isfinite(est), axis=1)
        mse = mse_eval(est, labels, ok) if ok.any() else (math.nan, math.nan)
        out.append(MethodResult(name, regime, mse, int(ok.sum()), int((~ok).sum()), est))
    return out


def report_csv(results: list[MethodResult]) -> str:
    rows = ["method,regime,mse_tau_a,mse_tau_i,rmse_tau_a,rmse_tau_i,pixels,failed"]
    for r in results:
        rows.append(f"{r.method},{r.regime},{r.mse[0]:.6g},{r.mse[1]:.6g},{r.rmse[0]:.6g},"
                    f"{r.rmse[1]:.6g},{r.n_pixels},{r.n_failed}")
    return "\n".join(rows) + "\n"


def distribution_text(results: list[MethodResult], bins: int = 100, span=(0.0, 5.0)) -> str:
    """Lifetime histograms as plain x/y series, one block per method and target."""
    blocks = []
    for r in results:
        for j, target in enumerate(("tau_a", "tau_i")):
            v = r.estimates[:, j]
            hist, edges = np.histogram(v[np.isfinite(v)], bins=bins, range=span)
            centers = 0.5 * (edges[1:] + edges[:-1])
            lines = [f"# {r.method} {r.regime} {target}"]
            lines += [f"{c:.4f} {n}" for c, n in zip(centers, hist)]
            blocks.append("\n".join(lines))
    return "\n\n".join(blocks) + "\n"


# --------------------------------------------------------------------------
# timing
# --------------------------------------------------------------------------

@dataclass
class BenchRow:
    batch_size: int
    latency_ms: float  # per batch, median over repetitions
    throughput: float  # pixels per millisecond
    repetitions: int
    workers: int


def bench(predict: Estimator, counts: np.ndarray, batch_sizes=(1, 4, 32, 128), repetitions: int = 5,
          workers: int = 1, clock=time.perf_counter) -> list[BenchRow]:
    """Wall-clock latency per batch and pixel throughput on this host.

    Each repetition streams the full batches of ``counts`` through
    ``predict``; its latency is the mean batch time. The table reports the
    median latency over repetitions and the matching throughput.
    """
    counts = np.asarray(counts)
    if len(counts) == 0:
        raise ValueError("no data to benchmark")
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    rows = []
    pool = ThreadPoolExecutor(workers) if workers > 1 else None
    try:
        for b in batch_sizes:
            n_batches = max(len(counts) // b, 1)
            batches = [counts[i * b:(i + 1) * b] for i in range(n_batches)]
            predict(batches[0])  # warm-up (JIT, caches)
            lat = []
            for _ in range(repetitions):
                t0 = clock()
                if pool is None:
                    for x in batches:
                        predict(x)
                else:
                    list(pool.map(predict, batches))
                lat.append((clock() - t0) * 1e3 / n_batches)
            med = statistics.median(lat)
            size = len(batches[0])
            rows.append(BenchRow(size, med, size / med if med > 0 else math.inf, repetitions, workers))
    finally:
        if pool is not None:
            pool.shutdown()
    return rows


def bench_csv(rows: list[BenchRow], label: str = "") -> str:
    out = ["label,batch_size,latency_ms,throughput_px_per_ms,repetitions,workers"]
    out += [f"{label},{r.batch_size},{r.latency_ms:.6g},{r.throughput:.6g},{r.repetitions},{r.workers}" for r in rows]
    return "\n".join(out) + "\n"
