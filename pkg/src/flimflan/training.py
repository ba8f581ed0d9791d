"""Backpropagation training for adder networks.

Batch norm runs on batch statistics while training and is folded into
(scale, shift) for validation and inference. Adder layers use the usual
surrogate gradients (full-precision ``x - w`` for weights, ``clip(w - x)`` for
inputs) and an adaptive per-layer rescaling of the weight gradient,
``g * sqrt(k) / ||g||``, before RMSProp.
"""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .network import NetworkModel, adder_conv_batch, adder_conv_backward, forward_batch, normalize_counts

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    initial_lr: float = 1e-3
    rmsprop_smoothing: float = 0.995
    rmsprop_eps: float = 1e-8
    batch_size: int = 128
    patience: int = 20
    max_epochs: int = 500
    seed: int = 0
    bn_momentum: float = 0.1
    adaptive_lr: bool = True
    bn_calibration: int = 1024  # samples used to re-estimate BN statistics each epoch; 0 keeps running averages
    frozen: bool = False  # diagnostics: run the loop without touching any parameter

    def __post_init__(self):
        if not self.initial_lr > 0:
            raise ValueError("learning rate must be positive")
        if not 0 < self.rmsprop_smoothing < 1:
            raise ValueError("smoothing must lie in (0, 1)")
        if self.batch_size < 1 or self.patience < 1 or self.max_epochs < 1:
            raise ValueError("batch_size, patience and max_epochs must be >= 1")


@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = 0
    stopping_epoch: int = 0
    val_mse: tuple[float, float] = (math.nan, math.nan)

    def as_table(self) -> str:
        lines = ["epoch  train_loss    val_loss"]
        for i, (t, v) in enumerate(zip(self.train_loss, self.val_loss), 1):
            mark = " *" if i == self.best_epoch else ""
            lines.append(f"{i:5d}  {t:10.5f}  {v:10.5f}{mark}")
        lines.append(f"stopped after epoch {self.stopping_epoch}; best epoch {self.best_epoch}; "
                     f"val MSE tau_a={self.val_mse[0]:.4f} tau_i={self.val_mse[1]:.4f} ns^2")
        return "\n".join(lines)

    def as_csv(self) -> str:
        rows = ["epoch,train_loss,val_loss"]
        rows += [f"{i},{t!r},{v!r}" for i, (t, v) in enumerate(zip(self.train_loss, self.val_loss), 1)]
        return "\n".join(rows) + "\n"


class TrainingDiverged(FloatingPointError):
    def __init__(self, msg, report=None):
        super().__init__(msg)
        self.report = report


def mse_loss(pred, gt) -> float:
    """Squared error summed over both outputs, averaged over the batch."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    if pred.size == 0:
        raise ValueError("empty batch")
    return float(np.sum((pred - gt) ** 2) / pred.shape[0])


def mse_loss_grad(pred, gt) -> np.ndarray:
    return 2.0 * (pred - gt) / pred.shape[0]


# --------------------------------------------------------------------------
# train-mode forward / backward
# --------------------------------------------------------------------------

def _bn_forward(pre, bn, update, momentum, unbiased=True):
    axes = (0, 1)
    mu = pre.mean(axis=axes)
    var = pre.var(axis=axes)
    inv = 1.0 / np.sqrt(var + bn.eps)
    xhat = (pre - mu) * inv
    if update:
        n = pre.shape[0] * pre.shape[1]
        stored = var * n / (n - 1) if unbiased and n > 1 else var
        bn.running_mean[:] = (1 - momentum) * bn.running_mean + momentum * mu
        bn.running_var[:] = (1 - momentum) * bn.running_var + momentum * stored
    return xhat, inv


def _bn_backward(g_z, xhat, inv, gamma):
    axes = (0, 1)
    n = g_z.shape[0] * g_z.shape[1]
    dgamma = (g_z * xhat).sum(axis=axes)
    dbeta = g_z.sum(axis=axes)
    g_xhat = g_z * gamma
    g_pre = inv / n * (n * g_xhat - g_xhat.sum(axis=axes) - xhat * (g_xhat * xhat).sum(axis=axes))
    return g_pre, dgamma, dbeta


class _Tape:
    """Train-mode forward pass recording what backward needs."""

    def __init__(self, model: NetworkModel, update_stats: bool, momentum: float = 0.1, unbiased: bool = True):
        self.model = model
        self.update = update_stats
        self.momentum = momentum
        self.unbiased = unbiased
        self.records = {}

    def layer(self, x, l):
        pre = adder_conv_batch(x, l.kernel3, l.stride)
        xhat, inv = _bn_forward(pre, l.bn, self.update, self.momentum, self.unbiased)
        z = l.bn.gamma * xhat + l.bn.beta
        self.records[id(l)] = (x, xhat, inv, z)
        return np.maximum(z, 0.0) if l.relu else z

    def forward(self, x):
        m = self.model
        for l in m.stem:
            x = self.layer(x, l)
        skip = x
        y = self.layer(self.layer(x, m.block[0]), m.block[1])
        c = m.crop
        s = skip[:, c:c + y.shape[1], :] + y
        self.res = (skip.shape, c, s > 0)
        x = np.maximum(s, 0.0)
        for l in m.tail:
            x = self.layer(x, l)
        self.tail_shape = x.shape
        flat = x.reshape(x.shape[0], 1, -1)
        outs = []
        for head in m.heads:
            z = flat
            for l in head:
                z = self.layer(z, l)
            outs.append(z[:, 0, 0])
        return np.stack(outs, axis=1)

    def layer_back(self, g, l, grads, exact):
        x, xhat, inv, z = self.records[id(l)]
        if l.relu:
            g = g * (z > 0)
        g_pre, dgamma, dbeta = _bn_backward(g, xhat, inv, l.bn.gamma)
        gw, gx = adder_conv_backward(x, l.kernel3, l.stride, g_pre, exact)
        grads[id(l)] = (gw[0] if l.kind == "dense" else gw, dgamma, dbeta)
        return gx

    def backward(self, g_out, exact=False):
        """Gradients keyed by layer id: ``(d_weights, d_gamma, d_beta)``.

        Returns ``(grads, d_input)``.
        """
        m = self.model
        grads = {}
        g_flat = None
        for j, head in enumerate(m.heads):
            g = g_out[:, j].reshape(-1, 1, 1)
            for l in reversed(head):
                g = self.layer_back(g, l, grads, exact)
            g_flat = g if g_flat is None else g_flat + g
        g = g_flat.reshape(self.tail_shape)
        for l in reversed(m.tail):
            g = self.layer_back(g, l, grads, exact)
        skip_shape, c, mask = self.res
        g = g * mask
        g_skip = np.zeros(skip_shape)
        g_skip[:, c:c + g.shape[1], :] += g
        g = self.layer_back(g, m.block[1], grads, exact)
        g = self.layer_back(g, m.block[0], grads, exact)
        g = g + g_skip
        for l in reversed(m.stem):
            g = self.layer_back(g, l, grads, exact)
        return grads, g


def recalibrate_bn(model: NetworkModel, x: np.ndarray) -> None:
    """Replace every running mean/variance with population statistics of ``x``.

    One train-mode pass over the whole calibration batch, so each layer sees
    inputs normalised exactly as inference will normalise them. The biased
    variance is stored so inference reproduces train-mode outputs on ``x``
    even for channels whose variance is near zero.
    """
    _Tape(model, update_stats=True, momentum=1.0, unbiased=False).forward(x)


def loss_and_grads(model: NetworkModel, x: np.ndarray, y: np.ndarray, *, exact: bool = False,
                   update_stats: bool = False, momentum: float = 0.1):
    """Train-mode loss on a normalized batch ``x`` of shape ``(B, bins, 1)``."""
    tape = _Tape(model, update_stats, momentum)
    pred = tape.forward(x)
    loss = mse_loss(pred, y)
    grads, _ = tape.backward(mse_loss_grad(pred, y), exact)
    return loss, grads


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------

@dataclass
class ParamSlot:
    value: np.ndarray
    adder: bool


def adaptive_rescale(g: np.ndarray) -> np.ndarray:
    """Scale an adder layer's gradient to l2 norm ``sqrt(g.size)``."""
    norm = float(np.sqrt(np.sum(g * g)))
    if norm == 0.0:
        return g
    return g * (math.sqrt(g.size) / norm)


def optimizer_step(params: list[ParamSlot], grads: list[np.ndarray], state: list[np.ndarray],
                   cfg: TrainConfig) -> None:
    """RMSProp update in place; adder weights get the adaptive rescaling first."""
    if len(params) != len(grads) or len(state) != len(params):
        raise ValueError("params, grads and state must align")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite gradient")
    rho = cfg.rmsprop_smoothing
    for p, g, v in zip(params, grads, state):
        if p.value.shape != g.shape:
            raise ValueError("gradient shape mismatch")
        if p.adder and cfg.adaptive_lr:
            g = adaptive_rescale(g)
        v *= rho
        v += (1.0 - rho) * g * g
        p.value -= cfg.initial_lr * g / (np.sqrt(v) + cfg.rmsprop_eps)


def _slots(model: NetworkModel) -> list[tuple[int, list[ParamSlot]]]:
    out = []
    for l in model.layers():
        out.append((id(l), [ParamSlot(l.weights, True), ParamSlot(l.bn.gamma, False),
                            ParamSlot(l.bn.beta, False)]))
    return out


# --------------------------------------------------------------------------
# loop
# --------------------------------------------------------------------------

def _as_arrays(data):
    if isinstance(data, tuple):
        x, y = data
    else:
        from .decay import stack
        x, y = stack(data)
    return np.asarray(x), np.asarray(y, dtype=np.float64)


def evaluate_loss(model: NetworkModel, x_counts: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Inference-mode loss and per-target MSE (no gating)."""
    pred = forward_batch(model.fold(), x_counts, gate=-np.inf)
    return mse_loss(pred, y), np.mean((pred - y) ** 2, axis=0)


def train(model: NetworkModel, train_set, val_set, cfg: TrainConfig = TrainConfig(),
          callback=None) -> tuple[NetworkModel, TrainReport]:
    """Minibatch training with early stopping on validation loss.

    ``train_set``/``val_set`` are record lists or ``(counts, labels)`` pairs.
    Returns the folded best-validation snapshot and the per-epoch report.
    The input ``model`` is not modified.
    """
    model = model.copy()
    if any(l.bn is None for l in model.layers()):
        raise ValueError("training needs a model with batch-norm parameters (use build_flan)")
    xc, y = _as_arrays(train_set)
    xv, yv = _as_arrays(val_set)
    if len(xc) == 0 or len(xv) == 0:
        raise ValueError("training and validation sets must be non-empty")
    if xc.shape[1] != model.input_length or xv.shape[1] != model.input_length:
        raise ValueError(f"model expects {model.input_length} bins, data has {xc.shape[1]}/{xv.shape[1]}")
    xn = normalize_counts(xc)[:, :, None]
    slots = _slots(model)
    flat_params = [p for _, ps in slots for p in ps]
    state = [np.zeros_like(p.value) for p in flat_params]

    report = TrainReport()
    best = (math.inf, None)
    stale = 0
    n = len(xn)
    calib = None
    if cfg.bn_calibration and not cfg.frozen:
        pick = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0])).permutation(n)
        calib = xn[np.sort(pick[:cfg.bn_calibration])]
    for epoch in range(1, cfg.max_epochs + 1):
        order = np.random.default_rng(np.random.SeedSequence([cfg.seed, epoch])).permutation(n)
        total = 0.0
        seen = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if len(idx) < 2 and n >= 2:
                continue  # batch statistics need two samples
            loss, grads = loss_and_grads(model, xn[idx], y[idx], update_stats=not cfg.frozen,
                                         momentum=cfg.bn_momentum)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"loss became {loss} in epoch {epoch}", report)
            total += loss * len(idx)
            seen += len(idx)
            if cfg.frozen:
                continue
            flat_grads = [g for key, _ in slots for g in grads[key]]
            try:
                optimizer_step(flat_params, flat_grads, state, cfg)
            except FloatingPointError as exc:
                raise TrainingDiverged(f"epoch {epoch}: {exc}", report) from exc
        if calib is not None:
            recalibrate_bn(model, calib)
        val, per_target = evaluate_loss(model, xv, yv)
        if not math.isfinite(val):
            raise TrainingDiverged(f"validation loss became {val} in epoch {epoch}", report)
        report.train_loss.append(total / max(seen, 1))
        report.val_loss.append(val)
        report.stopping_epoch = epoch
        if val < best[0]:
            best = (val, copy.deepcopy(model))
            report.best_epoch = epoch
            report.val_mse = (float(per_target[0]), float(per_target[1]))
            stale = 0
        else:
            stale += 1
        log.info("epoch %d train %.5f val %.5f", epoch, report.train_loss[-1], val)
        if callback is not None:
            callback(epoch, report)
        if stale >= cfg.patience:
            break
    return best[1].fold(), report
