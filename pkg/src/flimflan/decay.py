"""Synthetic TCSPC decays: IRF model, multi-exponential PDFs, Poisson histograms.

Conventions
-----------
Time is measured in bin indices ``t = 0 .. num_bins - 1``; a bin index maps to
``t * bin_width`` nanoseconds. Bi-exponential amplitude fractions follow the
component order, so ``a`` weights ``tau1`` and ``1 - a`` weights ``tau2``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class InstrumentConfig:
    num_bins: int = 256
    bin_width: float = 0.03906  # ns
    irf_center_bin: float = 14
    irf_fwhm: float = 0.167  # ns
    irf_order: int = 1

    def __post_init__(self):
        if self.num_bins < 2:
            raise ValueError("num_bins must be >= 2")
        if not self.bin_width > 0:
            raise ValueError("bin_width must be positive")
        if not 0 <= self.irf_center_bin < self.num_bins:
            raise ValueError("irf_center_bin outside the histogram")
        if not self.irf_fwhm > 0:
            raise ValueError("irf_fwhm must be positive")
        if self.irf_order < 1:
            raise ValueError("irf_order must be >= 1")

    @property
    def fwhm_bins(self) -> float:
        return self.irf_fwhm / self.bin_width


@dataclass(frozen=True)
class DecayParams:
    """Ground-truth generative parameters.

    ``components`` is a sequence of ``(amplitude_fraction, lifetime_ns)``.
    """

    components: tuple[tuple[float, float], ...]
    peak_count: float = 1000.0

    def __post_init__(self):
        comps = tuple((float(a), float(t)) for a, t in self.components)
        object.__setattr__(self, "components", comps)
        if not comps:
            raise ValueError("at least one component required")
        amps = [a for a, _ in comps]
        if any(a < 0 for a in amps):
            raise ValueError("amplitude fractions must be non-negative")
        if abs(math.fsum(amps) - 1.0) > 1e-12:
            raise ValueError(f"amplitude fractions must sum to 1, got {math.fsum(amps)!r}")
        if any(not t > 0 for _, t in comps):
            raise ValueError("lifetimes must be positive")
        if not self.peak_count >= 1:
            raise ValueError("peak_count must be >= 1")

    @classmethod
    def mono(cls, tau: float, peak_count: float = 1000.0) -> "DecayParams":
        return cls(((1.0, tau),), peak_count)

    @classmethod
    def bi(cls, a: float, tau1: float, tau2: float, peak_count: float = 1000.0) -> "DecayParams":
        return cls(((a, tau1), (1.0 - a, tau2)), peak_count)

    @property
    def amplitudes(self) -> np.ndarray:
        return np.array([a for a, _ in self.components])

    @property
    def lifetimes(self) -> np.ndarray:
        return np.array([t for _, t in self.components])


@dataclass
class Histogram:
    """Photon counts per time bin.

    ``bin_edges`` is only set on log-scale merged histograms and holds the
    original-bin index boundaries of each merged bin.
    """

    counts: np.ndarray
    bin_width: float = 0.03906
    bin_edges: np.ndarray | None = None

    def __post_init__(self):
        self.counts = np.asarray(self.counts)
        if np.any(self.counts < 0):
            raise ValueError("counts must be non-negative")
        if self.bin_edges is not None:
            edges = np.asarray(self.bin_edges, dtype=np.int64)
            if edges.size != self.counts.size + 1 or edges[0] != 0 or np.any(np.diff(edges) <= 0):
                raise ValueError("bin_edges must be strictly increasing from 0 with len(counts)+1 entries")
            self.bin_edges = edges

    def __len__(self):
        return self.counts.size

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass(frozen=True)
class LifetimePair:
    tau_a: float
    tau_i: float

    def __iter__(self):
        yield self.tau_a
        yield self.tau_i


@dataclass
class LabeledDecay:
    histogram: Histogram
    label: LifetimePair
    params: DecayParams


def gen_irf(cfg: InstrumentConfig) -> np.ndarray:
    """Generalized Gaussian IRF sampled at integer bins, peak value 1.

    ``exp(-2 * ((t - c) * 2 * (0.5 ln 2)^(1/2N) / FWHM)^(2N))`` with ``t - c``
    and FWHM both in bin units, so the half-maximum points are one FWHM apart
    for every order ``N``.
    """
    n = cfg.irf_order
    t = np.arange(cfg.num_bins, dtype=np.float64)
    u = (t - cfg.irf_center_bin) * 2.0 * (0.5 * math.log(2.0)) ** (1.0 / (2 * n)) / cfg.fwhm_bins
    return np.exp(-2.0 * u ** (2 * n))


def gen_pdf(params: DecayParams, cfg: InstrumentConfig) -> np.ndarray:
    t = np.arange(cfg.num_bins, dtype=np.float64) * cfg.bin_width
    out = np.zeros(cfg.num_bins)
    for a, tau in params.components:
        out += a * np.exp(-t / tau)
    return out


def noiseless_decay(params: DecayParams, cfg: InstrumentConfig, irf: np.ndarray | None = None) -> np.ndarray:
    """IRF (unit sum) convolved with the PDF, truncated and rescaled to peak ``N_p``."""
    if irf is None:
        irf = gen_irf(cfg)
    if not irf.sum() > 0:
        raise ValueError("degenerate IRF: no positive mass")
    irf = irf / irf.sum()
    conv = np.convolve(irf, gen_pdf(params, cfg))[: cfg.num_bins]
    peak = conv.max()
    if not peak > 0:
        raise ValueError("degenerate decay: convolution is identically zero")
    return conv * (params.peak_count / peak)


def synthesize_decay(
    params: DecayParams,
    cfg: InstrumentConfig,
    seed: int | np.random.Generator | None = None,
    *,
    noise: bool = True,
    background: float = 0.0,
) -> Histogram:
    """Draw one Poisson-noised histogram.

    With ``noise=False`` the noiseless means are returned unrounded as float
    counts.
    """
    mean = noiseless_decay(params, cfg)
    if background:
        if background < 0:
            raise ValueError("background must be non-negative")
        mean = mean + background
    if not noise:
        return Histogram(mean, cfg.bin_width)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return Histogram(rng.poisson(mean).astype(np.int64), cfg.bin_width)


def tau_labels(params: DecayParams) -> LifetimePair:
    """Amplitude- and intensity-averaged lifetimes."""
    first = math.fsum(a * t for a, t in params.components)
    second = math.fsum(a * t * t for a, t in params.components)
    return LifetimePair(first, second / first)


@dataclass(frozen=True)
class DatasetSpec:
    """Parameter ranges for a shuffled mono/bi-exponential dataset.

    Defaults follow the synthetic-data table: mono ``tau`` in [0.1, 5] ns,
    bi ``tau1`` in [0.1, 0.5], ``tau2`` in [1, 3], ``a`` in [0, 1]. Peak counts
    are drawn uniformly from ``peak_counts``.
    """

    size: int
    seed: int = 0
    mono_fraction: float = 0.5
    mono_tau: tuple[float, float] = (0.1, 5.0)
    bi_tau1: tuple[float, float] = (0.1, 0.5)
    bi_tau2: tuple[float, float] = (1.0, 3.0)
    bi_a: tuple[float, float] = (0.0, 1.0)
    peak_counts: tuple[float, float] = (10.0, 5000.0)
    background: float = 0.0

    def __post_init__(self):
        if self.size < 1:
            raise ValueError("dataset size must be >= 1")
        if not 0.0 <= self.mono_fraction <= 1.0:
            raise ValueError("mono_fraction must lie in [0, 1]")
        for name in ("mono_tau", "bi_tau1", "bi_tau2", "bi_a", "peak_counts"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"inverted range for {name}: {lo} > {hi}")
        if self.mono_tau[0] <= 0 or self.bi_tau1[0] <= 0 or self.bi_tau2[0] <= 0:
            raise ValueError("lifetime ranges must be positive")
        if self.bi_a[0] < 0 or self.bi_a[1] > 1:
            raise ValueError("amplitude range must lie in [0, 1]")
        if self.peak_counts[0] < 1:
            raise ValueError("peak counts must be >= 1")

    @property
    def n_mono(self) -> int:
        return int(round(self.size * self.mono_fraction))


def record_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream per (dataset seed, record index)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def draw_params(spec: DatasetSpec, index: int, rng: np.random.Generator) -> DecayParams:
    peak = rng.uniform(*spec.peak_counts)
    if index < spec.n_mono:
        return DecayParams.mono(rng.uniform(*spec.mono_tau), peak)
    a = rng.uniform(*spec.bi_a)
    return DecayParams.bi(a, rng.uniform(*spec.bi_tau1), rng.uniform(*spec.bi_tau2), peak)


def make_record(spec: DatasetSpec, index: int, cfg: InstrumentConfig) -> LabeledDecay:
    rng = record_rng(spec.seed, index)
    params = draw_params(spec, index, rng)
    hist = synthesize_decay(params, cfg, rng, background=spec.background)
    return LabeledDecay(hist, tau_labels(params), params)


def gen_dataset(spec: DatasetSpec, cfg: InstrumentConfig | None = None) -> list[LabeledDecay]:
    """Generate ``spec.size`` labelled decays, mono records first, then shuffled."""
    cfg = cfg or InstrumentConfig()
    records = [make_record(spec, i, cfg) for i in range(spec.size)]
    order = np.random.default_rng(np.random.SeedSequence([int(spec.seed), 2**32 - 1])).permutation(spec.size)
    return [records[i] for i in order]


def stack(records: Sequence[LabeledDecay]) -> tuple[np.ndarray, np.ndarray]:
    """Counts matrix ``(n, bins)`` and label matrix ``(n, 2)`` of a record list."""
    x = np.stack([r.histogram.counts for r in records])
    y = np.array([[r.label.tau_a, r.label.tau_i] for r in records], dtype=np.float64)
    return x, y
