"""Classical lifetime estimators: centre of mass, phasor, and LM deconvolution fits."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .decay import DecayParams, Histogram, InstrumentConfig, LifetimePair, gen_irf, tau_labels


class InsufficientPhotons(ValueError):
    pass


def _counts(h) -> np.ndarray:
    return np.asarray(h.counts if isinstance(h, Histogram) else h, dtype=np.float64)


# --------------------------------------------------------------------------
# centre of mass
# --------------------------------------------------------------------------

def irf_centroid(cfg: InstrumentConfig) -> float:
    irf = gen_irf(cfg)
    return float(np.dot(np.arange(cfg.num_bins), irf) / irf.sum())


def cmm_estimate(h, cfg: InstrumentConfig = InstrumentConfig(), window: tuple[int, int] | None = None,
                 ideal_irf: bool = False) -> float:
    """Centre-of-mass lifetime in ns.

    The centroid is taken over ``window`` (inclusive bin range, default from
    the peak bin to the last bin), measured from the window start. Sample
    points sit at bin starts, so half a bin is added back. When the window
    opens before the IRF centroid, that remaining IRF delay is subtracted;
    a window opening after it needs no correction because an exponential
    tail is memoryless.
    """
    counts = _counts(h)
    if counts.sum() <= 0:
        raise InsufficientPhotons("histogram has no photons")
    start, stop = window if window is not None else (int(np.argmax(counts)), counts.size - 1)
    if not 0 <= start <= stop < counts.size:
        raise ValueError(f"invalid window {start}..{stop}")
    w = counts[start:stop + 1]
    total = w.sum()
    if total <= 0:
        raise InsufficientPhotons("no photons inside the analysis window")
    centroid = np.dot(np.arange(w.size), w) / total + 0.5
    delay = 0.0 if ideal_irf else max(irf_centroid(cfg) - start, 0.0)
    return max((centroid - delay) * cfg.bin_width, 0.0)


# --------------------------------------------------------------------------
# phasor
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class PhasorPoint:
    g: float
    s: float
    harmonic: int = 1
    pixel: tuple[int, int] | None = None


def angular_frequency(cfg: InstrumentConfig) -> float:
    """Fundamental angular frequency (rad/ns) of one histogram period."""
    return 2.0 * math.pi / (cfg.num_bins * cfg.bin_width)


def _raw_phasor(counts, cfg, k):
    w = k * angular_frequency(cfg)
    t = np.arange(counts.shape[-1]) * cfg.bin_width
    total = counts.sum(axis=-1)
    return counts @ np.cos(w * t) / total, counts @ np.sin(w * t) / total


def phasor_transform(h, cfg: InstrumentConfig = InstrumentConfig(), harmonic: int = 1,
                     calibrate_irf: bool = False, pixel=None) -> PhasorPoint:
    """Normalised cosine/sine transforms of a decay.

    With ``calibrate_irf`` the phasor is divided (as a complex number) by the
    phasor of the synthetic IRF, removing its delay and spread.
    """
    counts = _counts(h)
    if counts.sum() <= 0:
        raise InsufficientPhotons("histogram has no photons")
    g, s = _raw_phasor(counts, cfg, harmonic)
    if calibrate_irf:
        gi, si = _raw_phasor(gen_irf(cfg), cfg, harmonic)
        z = complex(g, s) / complex(gi, si)
        g, s = z.real, z.imag
    return PhasorPoint(float(g), float(s), harmonic, pixel)


def phasor_lifetime(p: PhasorPoint, cfg: InstrumentConfig = InstrumentConfig()) -> float:
    """Phase lifetime ``s / (g * omega)`` of a mono-exponential phasor."""
    if not p.g > 0:
        raise ValueError("phase lifetime needs g > 0")
    return p.s / (p.g * p.harmonic * angular_frequency(cfg))


# --------------------------------------------------------------------------
# Levenberg-Marquardt deconvolution fit
# --------------------------------------------------------------------------

@dataclass
class FitResult:
    params: DecayParams
    residual_norm: float
    iterations: int
    converged: bool
    cost_history: list[float]

    @property
    def lifetimes(self) -> LifetimePair:
        return tau_labels(self.params)


# lifetimes beyond ten histogram spans are indistinguishable from a flat offset
_MAX_SPANS = 10.0
_MIN_TAU = 1e-3


class _DecayModel:
    """Convolution model and analytic Jacobian in unconstrained coordinates.

    mono: theta = (log A, log tau)
    bi:   theta = (log A, logit a, log tau1, log tau2)
    """

    def __init__(self, cfg: InstrumentConfig, order: int):
        self.cfg = cfg
        self.order = order
        irf = gen_irf(cfg)
        self.irf = irf / irf.sum()
        self.t = np.arange(cfg.num_bins) * cfg.bin_width

    def conv(self, v):
        return np.convolve(self.irf, v)[: self.cfg.num_bins]

    def unpack(self, theta):
        amp = math.exp(theta[0])
        if self.order == 1:
            return amp, [1.0], [math.exp(theta[1])]
        a = 1.0 / (1.0 + math.exp(-theta[1]))
        return amp, [a, 1.0 - a], [math.exp(theta[2]), math.exp(theta[3])]

    def pack(self, amp, fracs, taus):
        if self.order == 1:
            return np.array([math.log(amp), math.log(taus[0])])
        a = min(max(fracs[0], 1e-6), 1 - 1e-6)
        return np.array([math.log(amp), math.log(a / (1 - a)), math.log(taus[0]), math.log(taus[1])])

    def evaluate(self, theta, jac=True):
        amp, fracs, taus = self.unpack(theta)
        exps = [np.exp(-self.t / tau) for tau in taus]
        basis = [self.conv(e) for e in exps]
        shape = sum(f * b for f, b in zip(fracs, basis))
        model = amp * shape
        if not jac:
            return model, None
        cols = [model]
        if self.order == 2:
            a = fracs[0]
            cols.append(amp * a * (1 - a) * (basis[0] - basis[1]))
        for f, e, tau in zip(fracs, exps, taus):
            cols.append(amp * f * self.conv(e * self.t / tau))
        return model, np.stack(cols, axis=1)

    def clip(self, theta):
        theta = theta.copy()
        lo = math.log(_MIN_TAU)
        hi = math.log(_MAX_SPANS * self.cfg.num_bins * self.cfg.bin_width)
        theta[-self.order:] = np.clip(theta[-self.order:], lo, hi)
        theta[0] = min(theta[0], 50.0)
        if self.order == 2:
            theta[1] = float(np.clip(theta[1], -30.0, 30.0))
        return theta


def nlsf_fit(h, cfg: InstrumentConfig = InstrumentConfig(), model_order: int = 1,
             init: DecayParams | None = None, *, min_photons: float = 50, max_iter: int = 200,
             rtol: float = 1e-8, lam0: float = 1e-3) -> FitResult:
    """Least-squares deconvolution fit of ``A * (IRF * sum a_i exp(-t/tau_i))``.

    Levenberg-Marquardt with Marquardt diagonal scaling; the damping factor
    goes down by 10 after an accepted step and up by 10 after a rejected one.
    Lifetimes are fitted in log space and the bi-exponential fraction through
    a logistic map, so every iterate is a valid parameter set.
    """
    if model_order not in (1, 2):
        raise ValueError("model_order must be 1 or 2")
    y = _counts(h)
    if y.size != cfg.num_bins:
        raise ValueError(f"histogram has {y.size} bins, config says {cfg.num_bins}")
    if y.sum() <= min_photons:
        raise InsufficientPhotons(f"{y.sum():.0f} photons <= fit threshold {min_photons}")
    model = _DecayModel(cfg, model_order)
    if init is None:
        fracs, taus = ([1.0], [1.0]) if model_order == 1 else ([0.5, 0.5], [0.3, 2.0])
        shape, _ = model.evaluate(model.pack(1.0, fracs, taus), jac=False)
        amp = max(y.max(), 1.0) / shape.max()
    else:
        if len(init.components) != model_order:
            raise ValueError("init component count does not match model_order")
        fracs, taus = list(init.amplitudes), list(init.lifetimes)
        shape, _ = model.evaluate(model.pack(1.0, fracs, taus), jac=False)
        amp = init.peak_count / shape.max()
    theta = model.pack(amp, fracs, taus)

    pred, J = model.evaluate(theta)
    r = y - pred
    cost = float(r @ r)
    history = [cost]
    lam = lam0
    converged = False
    it = 0
    while it < max_iter:
        it += 1
        A = J.T @ J
        g = J.T @ r
        diag = np.diag(A).copy()
        diag[diag <= 0] = 1e-12
        try:
            step = np.linalg.solve(A + lam * np.diag(diag), g)
        except np.linalg.LinAlgError:
            lam *= 10
            continue
        if not np.all(np.isfinite(step)):
            lam *= 10
            continue
        cand = model.clip(theta + step)
        pred_c, J_c = model.evaluate(cand)
        r_c = y - pred_c
        cost_c = float(r_c @ r_c)
        if cost_c <= cost:
            rel = (cost - cost_c) / cost if cost > 0 else 0.0
            small_step = np.max(np.abs(cand - theta)) < 1e-10
            theta, r, J, cost = cand, r_c, J_c, cost_c
            history.append(cost)
            lam = max(lam / 10, 1e-12)
            if rel < rtol or small_step:
                converged = True
                break
        else:
            lam *= 10
            if lam > 1e12:
                # no descent direction left at this precision: stationary point
                converged = True
                break
    amp, fracs, taus = model.unpack(theta)
    final, _ = model.evaluate(theta, jac=False)
    est = DecayParams(tuple(zip(fracs, taus)), max(float(final.max()), 1.0))
    return FitResult(est, math.sqrt(cost), it, converged, history)
