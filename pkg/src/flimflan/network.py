"""Multiplication-free 1-D adder network for lifetime regression.

Every adder layer scores input windows against its filters with a negative
l1 distance,

    y[w_o, c_o] = -sum_{c_i} sum_{k} |x[w_o * S + k, c_i] - W[k, c_i, c_o]|

followed by a per-channel affine map (folded batch norm) and optionally ReLU.
No padding is used; strides do the down-sampling. Feature maps are stored
channels-last, ``(batch, width, channels)``, inside the engine.

The same dataflow runs in float64 (``forward``) and over integer fixed-point
words (``forward_fixed``).
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace

import numpy as np
from numba import njit

from .decay import Histogram, LifetimePair
from .quantize import QFormat, QuantizedPlane, decode, encode, narrow, shift_round

BN_EPS = 1e-4


# --------------------------------------------------------------------------
# kernels
# --------------------------------------------------------------------------

@njit(cache=True, nogil=True)
def _adder_fwd(x, w, stride, out):
    # x (B, Wi, Ci), w (K, Ci, Co), out (B, Wo, Co); sums run c_i outer, k inner
    B, Wo, Co = out.shape
    K, Ci, _ = w.shape
    acc = np.zeros(Co, dtype=out.dtype)
    for b in range(B):
        for wo in range(Wo):
            acc[:] = 0
            base = wo * stride
            for ci in range(Ci):
                for k in range(K):
                    xv = x[b, base + k, ci]
                    for co in range(Co):
                        acc[co] += abs(xv - w[k, ci, co])
            for co in range(Co):
                out[b, wo, co] = -acc[co]


@njit(cache=True, nogil=True)
def _adder_bwd(x, w, stride, gy, gw, gx, exact):
    # gy (B, Wo, Co) is the gradient of the pre-affine output.
    # exact=0: weight grad uses (x - w), input grad uses clip(w - x, -1, 1)
    # exact=1: true subgradients sign(x - w) and sign(w - x)
    B, Wo, Co = gy.shape
    K, Ci, _ = w.shape
    for b in range(B):
        for wo in range(Wo):
            base = wo * stride
            for ci in range(Ci):
                for k in range(K):
                    xv = x[b, base + k, ci]
                    gsum = 0.0
                    for co in range(Co):
                        d = xv - w[k, ci, co]
                        g = gy[b, wo, co]
                        if exact:
                            s = 1.0 if d > 0 else (-1.0 if d < 0 else 0.0)
                            gw[k, ci, co] += g * s
                            gsum -= g * s
                        else:
                            gw[k, ci, co] += g * d
                            c = -d
                            if c > 1.0:
                                c = 1.0
                            elif c < -1.0:
                                c = -1.0
                            gsum += g * c
                    gx[b, base + k, ci] += gsum


def out_width(w_in: int, k: int, stride: int) -> int:
    return (w_in - k) // stride + 1


def adder_conv_batch(x: np.ndarray, w: np.ndarray, stride: int) -> np.ndarray:
    """Pre-affine adder convolution over a channels-last batch ``(B, Wi, Ci)``."""
    B, Wi, Ci = x.shape
    K, wci, Co = w.shape
    if wci != Ci:
        raise ValueError(f"input has {Ci} channels, filters expect {wci}")
    Wo = out_width(Wi, K, stride)
    if Wo < 1:
        raise ValueError(f"input width {Wi} too short for kernel {K}")
    out = np.empty((B, Wo, Co), dtype=x.dtype)
    _adder_fwd(np.ascontiguousarray(x), np.ascontiguousarray(w.astype(x.dtype)), stride, out)
    return out


def adder_conv_backward(x, w, stride, gy, exact=False):
    """Gradients ``(gw, gx)`` of a pre-affine adder convolution.

    By default the weight gradient is the full-precision difference ``x - w``
    and the input gradient is ``w - x`` clipped to [-1, 1]; ``exact=True``
    uses the true sign subgradients instead.
    """
    gw = np.zeros(w.shape)
    gx = np.zeros(x.shape)
    _adder_bwd(np.ascontiguousarray(x, dtype=np.float64), np.ascontiguousarray(w, dtype=np.float64),
               stride, np.ascontiguousarray(gy, dtype=np.float64), gw, gx, 1 if exact else 0)
    return gw, gx


# --------------------------------------------------------------------------
# layers
# --------------------------------------------------------------------------

@dataclass
class BnParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = BN_EPS

    def __post_init__(self):
        if np.any(np.asarray(self.running_var) < 0):
            raise ValueError("running variance must be non-negative")
        if not self.eps > 0:
            raise ValueError("eps must be positive")

    @classmethod
    def identity(cls, n: int, eps: float = BN_EPS) -> "BnParams":
        return cls(np.ones(n), np.zeros(n), np.zeros(n), np.full(n, 1.0 - eps), eps)

    def apply(self, x):
        """Unfolded batch norm with running statistics."""
        return (x - self.running_mean) / np.sqrt(self.running_var + self.eps) * self.gamma + self.beta


def fold_bn(bn: BnParams) -> tuple[np.ndarray, np.ndarray]:
    inv = 1.0 / np.sqrt(np.asarray(bn.running_var, dtype=np.float64) + bn.eps)
    scale = bn.gamma * inv
    shift = bn.beta - bn.gamma * bn.running_mean * inv
    return scale, shift


@dataclass
class AdderConvLayer:
    weights: np.ndarray  # (K, CH_i, CH_o)
    stride: int = 1
    scale: np.ndarray | None = None
    shift: np.ndarray | None = None
    relu: bool = True
    bn: BnParams | None = None
    # expected pre-activation per output channel (the BN running mean once
    # folded); lets quantization re-derive the shift from the rounded scale
    center: np.ndarray | None = None

    kind = "conv"

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 3:
            raise ValueError("conv weights must be (K, CH_i, CH_o)")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        co = self.weights.shape[2]
        if self.scale is None:
            self.scale = np.ones(co)
        if self.shift is None:
            self.shift = np.zeros(co)
        self.scale = np.asarray(self.scale, dtype=np.float64)
        self.shift = np.asarray(self.shift, dtype=np.float64)
        if self.scale.shape != (co,) or self.shift.shape != (co,):
            raise ValueError("affine vectors must have one entry per output channel")
        if self.center is not None:
            self.center = np.asarray(self.center, dtype=np.float64)
            if self.center.shape != (co,):
                raise ValueError("center must have one entry per output channel")

    @property
    def kernel(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weights.shape[2]

    @property
    def kernel3(self) -> np.ndarray:
        return self.weights

    def affine(self) -> tuple[np.ndarray, np.ndarray]:
        return fold_bn(self.bn) if self.bn is not None else (self.scale, self.shift)

    def n_params(self) -> int:
        return self.weights.size + 2 * self.out_channels

    def folded(self):
        if self.bn is None:
            return copy.deepcopy(self)
        scale, shift = fold_bn(self.bn)
        return replace(self, weights=self.weights.copy(), scale=scale, shift=shift, bn=None,
                       center=np.array(self.bn.running_mean, dtype=np.float64))


@dataclass
class AdderDenseLayer(AdderConvLayer):
    """Adder layer over a flat feature vector; ``weights`` is ``(in, out)``.

    Internally treated as a width-1 convolution with a single-tap kernel.
    """

    kind = "dense"

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 2:
            raise ValueError("dense weights must be (in_features, out_features)")
        self.weights = w[None]
        super().__post_init__()
        self.weights = w

    @property
    def kernel(self) -> int:
        return 1

    @property
    def in_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def out_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel3(self) -> np.ndarray:
        return self.weights[None]


def adder_conv_forward(x: np.ndarray, layer: AdderConvLayer) -> np.ndarray:
    """One adder layer on a single ``(CH_i, W_i)`` feature map -> ``(CH_o, W_o)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("expected a (CH_i, W_i) feature map")
    y = _layer_float(x.T[None], layer)
    return y[0].T


def _layer_float(x: np.ndarray, layer: AdderConvLayer) -> np.ndarray:
    pre = adder_conv_batch(x, layer.kernel3, layer.stride)
    scale, shift = layer.affine()
    y = pre * scale + shift
    return np.maximum(y, 0.0) if layer.relu else y


# --------------------------------------------------------------------------
# model
# --------------------------------------------------------------------------

@dataclass
class NetworkModel:
    """Backbone (stem -> residual block -> tail) feeding two dense heads.

    ``heads[0]`` predicts the amplitude-averaged lifetime, ``heads[1]`` the
    intensity-averaged one. The residual block adds its (centre-cropped) input
    to the output of its second layer before a ReLU.
    """

    variant: str
    input_length: int
    stem: list[AdderConvLayer]
    block: list[AdderConvLayer]
    tail: list[AdderConvLayer]
    heads: list[list[AdderDenseLayer]]
    gate: float = 0.0
    quantized: QuantizedPlane | None = None

    def __post_init__(self):
        if len(self.heads) != 2:
            raise ValueError("model needs exactly two heads")
        if len(self.block) != 2 or any(l.stride != 1 for l in self.block):
            raise ValueError("residual block must hold two stride-1 layers")
        self.check_shapes()

    def layers(self) -> list[AdderConvLayer]:
        return [*self.stem, *self.block, *self.tail, *self.heads[0], *self.heads[1]]

    def backbone_widths(self) -> dict[str, int]:
        w = self.input_length
        widths = {"input": w}
        for l in self.stem:
            w = out_width(w, l.kernel, l.stride)
        widths["block_in"] = w
        for l in self.block:
            w = out_width(w, l.kernel, 1)
        widths["block_out"] = w
        for l in self.tail:
            w = out_width(w, l.kernel, l.stride)
        widths["flat"] = w
        return widths

    @property
    def crop(self) -> int:
        w = self.backbone_widths()
        return (w["block_in"] - w["block_out"]) // 2

    def check_shapes(self):
        ch = 1
        w = self.input_length
        for l in [*self.stem, *self.block, *self.tail]:
            if l.kind != "conv" or l.in_channels != ch:
                raise ValueError(f"channel mismatch: layer expects {l.in_channels}, got {ch}")
            w = out_width(w, l.kernel, l.stride)
            if w < 1:
                raise ValueError("backbone shrinks input below one sample")
            ch = l.out_channels
        if self.block[0].in_channels != self.block[1].out_channels:
            raise ValueError("residual block must preserve channel count")
        flat = w * ch
        for head in self.heads:
            n = flat
            for l in head:
                if l.kind != "dense" or l.in_channels != n:
                    raise ValueError(f"head layer expects {l.in_channels} inputs, got {n}")
                n = l.out_channels
            if n != 1:
                raise ValueError("each head must end in a single output")

    def n_params(self) -> int:
        return sum(l.n_params() for l in self.layers())

    @property
    def n_strided(self) -> int:
        return sum(1 for l in [*self.stem, *self.block, *self.tail] if l.stride > 1)

    def fold(self) -> "NetworkModel":
        """Copy with every batch norm folded into (scale, shift)."""
        return replace(
            self,
            stem=[l.folded() for l in self.stem],
            block=[l.folded() for l in self.block],
            tail=[l.folded() for l in self.tail],
            heads=[[l.folded() for l in h] for h in self.heads],
            quantized=None,
        )

    def with_quantized(self, plane: QuantizedPlane) -> "NetworkModel":
        return replace(self, quantized=plane)

    def copy(self) -> "NetworkModel":
        return copy.deepcopy(self)


def normalize_counts(counts: np.ndarray) -> np.ndarray:
    """Scale each histogram to unit peak; all-zero rows stay zero."""
    x = np.asarray(counts, dtype=np.float64)
    peak = x.max(axis=-1, keepdims=True)
    return np.divide(x, peak, out=np.zeros_like(x), where=peak > 0)


def threshold_gate(h: Histogram | np.ndarray, gate: float) -> bool:
    """True if the pixel is foreground (total photon count strictly above ``gate``)."""
    counts = h.counts if isinstance(h, Histogram) else np.asarray(h)
    return bool(counts.sum() > gate)


def _backbone(model, x, layer_fn, residual_fn, layers=None):
    for l in model.stem:
        x = layer_fn(x, l)
    skip = x
    x = layer_fn(layer_fn(x, model.block[0]), model.block[1])
    c = model.crop
    x = residual_fn(skip[:, c:c + x.shape[1], :], x)
    for l in model.tail:
        x = layer_fn(x, l)
    return x.reshape(x.shape[0], 1, -1)


def _heads(model, flat, layer_fn, head_layers):
    outs = []
    for head in head_layers:
        z = flat
        for l in head:
            z = layer_fn(z, l)
        outs.append(z[:, 0, 0])
    return np.stack(outs, axis=1)


def _check_input(model, counts):
    counts = np.asarray(counts)
    if counts.ndim == 1:
        counts = counts[None]
    if counts.shape[1] != model.input_length:
        raise ValueError(f"model expects {model.input_length} bins, got {counts.shape[1]}")
    return counts


def forward_batch(model: NetworkModel, counts: np.ndarray, gate: float | None = None) -> np.ndarray:
    """Float inference over a ``(n, bins)`` count matrix -> ``(n, 2)`` lifetimes (ns).

    Pixels whose total count does not exceed the gate get ``(0, 0)``.
    """
    counts = _check_input(model, counts)
    gate = model.gate if gate is None else gate
    out = np.zeros((counts.shape[0], 2))
    fg = counts.sum(axis=1) > gate
    if not fg.any():
        return out
    x = normalize_counts(counts[fg])[:, :, None]

    def layer_fn(z, l):
        return _layer_float(z, l)

    def residual_fn(skip, y):
        return np.maximum(skip + y, 0.0)

    flat = _backbone(model, x, layer_fn, residual_fn)
    out[fg] = _heads(model, flat, layer_fn, model.heads)
    return out


def forward(model: NetworkModel, h: Histogram, gate: float | None = None) -> LifetimePair:
    if len(h) != model.input_length:
        raise ValueError(f"model expects {model.input_length} bins, got {len(h)}")
    tau_a, tau_i = forward_batch(model, h.counts[None], gate)[0]
    return LifetimePair(float(tau_a), float(tau_i))


# --------------------------------------------------------------------------
# fixed point
# --------------------------------------------------------------------------

@njit(cache=True, nogil=True)
def _fixed_epilogue(pre, scale, shift, frac, lo, hi, saturate, relu):
    # in place: narrow(pre), y = round(pre * scale >> frac) + shift, narrow(y), optional ReLU;
    # rounding is half away from zero and wrap uses floor modulo, matching quantize.narrow
    span = hi - lo + 1
    half = np.int64(1) << (frac - 1) if frac > 0 else np.int64(0)
    B, W, C = pre.shape
    for b in range(B):
        for i in range(W):
            for c in range(C):
                v = pre[b, i, c]
                if v > hi or v < lo:
                    v = (hi if v > hi else lo) if saturate else (v - lo) % span + lo
                p = v * scale[c]
                if frac > 0:
                    m = (abs(p) + half) >> frac
                    p = -m if p < 0 else m
                y = p + shift[c]
                if y > hi or y < lo:
                    y = (hi if y > hi else lo) if saturate else (y - lo) % span + lo
                if relu and y < 0:
                    y = 0
                pre[b, i, c] = y


def fixed_epilogue(pre, scale, shift, frac: int, fm: QFormat, relu: bool) -> np.ndarray:
    """Affine rescale, saturation and ReLU of pre-activation words (fused kernel)."""
    out = np.array(pre, dtype=np.int64, order="C")
    _fixed_epilogue(out, np.asarray(scale, dtype=np.int64), np.asarray(shift, dtype=np.int64), frac,
                    fm.min_word, fm.max_word, fm.saturate, relu)
    return out


def _layer_fixed(x, qlayer, layer, fm: QFormat, pf: QFormat):
    """Adder layer over fm-format words with param-format weights/affine."""
    up = fm.fraction_bits - pf.fraction_bits
    w = qlayer.weights.raw
    if layer.kind == "dense":
        w = w[None]
    if up >= 0:
        pre = adder_conv_batch(x, w << up, layer.stride)
    else:
        # align on the finer parameter grid, then drop back to the fm grid
        pre = shift_round(adder_conv_batch(x << -up, w, layer.stride), -up)
    return fixed_epilogue(pre, qlayer.scale.raw, shift_round(qlayer.shift.raw, -up), pf.fraction_bits, fm,
                          layer.relu)


def forward_fixed_batch(model: NetworkModel, counts: np.ndarray, fm_fmt: QFormat | None = None,
                        gate: float | None = None) -> np.ndarray:
    """Fixed-point inference; returns decoded lifetimes ``(n, 2)`` in ns."""
    words = forward_fixed_words(model, counts, fm_fmt, gate)
    fm = fm_fmt or model.quantized.feature_format
    return decode(words, fm)


def forward_fixed_words(model: NetworkModel, counts: np.ndarray, fm_fmt: QFormat | None = None,
                        gate: float | None = None) -> np.ndarray:
    """Raw output words of the fixed-point path (bit-exact reference)."""
    if model.quantized is None:
        raise ValueError("model has no quantized parameter plane; run quantize_model first")
    counts = _check_input(model, counts)
    plane = model.quantized
    fm = fm_fmt or plane.feature_format
    pf = plane.param_format
    gate = model.gate if gate is None else gate
    out = np.zeros((counts.shape[0], 2), dtype=np.int64)
    fg = counts.sum(axis=1) > gate
    if not fg.any():
        return out
    x = np.asarray(encode(normalize_counts(counts[fg]), fm), dtype=np.int64)[:, :, None]
    qmap = {id(l): q for l, q in zip(model.layers(), plane.layers)}

    def layer_fn(z, l):
        return _layer_fixed(z, qmap[id(l)], l, fm, pf)

    def residual_fn(skip, y):
        return np.maximum(narrow(skip + y, fm), 0)

    flat = _backbone(model, x, layer_fn, residual_fn)
    out[fg] = _heads(model, flat, layer_fn, model.heads)
    return out


def forward_fixed(model: NetworkModel, h: Histogram, fm_fmt: QFormat | None = None,
                  gate: float | None = None) -> LifetimePair:
    if len(h) != model.input_length:
        raise ValueError(f"model expects {model.input_length} bins, got {len(h)}")
    tau_a, tau_i = forward_fixed_batch(model, h.counts[None], fm_fmt, gate)[0]
    return LifetimePair(float(tau_a), float(tau_i))


# --------------------------------------------------------------------------
# reference architectures
# --------------------------------------------------------------------------

# (kernel, out_channels, stride)
ARCHITECTURES = {
    "flan": dict(
        input_length=256,
        stem=[(7, 16, 2), (5, 16, 2)],
        block=3,
        tail=[(3, 24, 2), (3, 24, 2)],
        head_hidden=28,
    ),
    "flan-ls": dict(
        input_length=80,
        stem=[(7, 12, 2)],
        block=3,
        tail=[(3, 16, 3)],
        head_hidden=8,
    ),
}


def _init_weights(rng, shape, fan_in):
    return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape)


def build_flan(variant: str = "flan", seed: int = 0, head_hidden: int | None = None,
               gate: float = 0.0) -> NetworkModel:
    """Reference architecture with freshly initialised weights and identity batch norms.

    ``variant`` is ``"flan"`` (256-bin input) or ``"flan-ls"`` (80-bin
    log-compressed input).
    """
    variant = variant.lower().replace("_", "-").replace("+", "-")
    if variant not in ARCHITECTURES:
        raise ValueError(f"unknown variant {variant!r}")
    arch = ARCHITECTURES[variant]
    rng = np.random.default_rng(seed)
    hidden = head_hidden or arch["head_hidden"]

    def conv(k, ci, co, s, relu=True):
        return AdderConvLayer(_init_weights(rng, (k, ci, co), k * ci), s, relu=relu, bn=BnParams.identity(co))

    ch = 1
    stem = []
    for k, co, s in arch["stem"]:
        stem.append(conv(k, ch, co, s))
        ch = co
    block = [conv(arch["block"], ch, ch, 1), conv(arch["block"], ch, ch, 1, relu=False)]
    tail = []
    for k, co, s in arch["tail"]:
        tail.append(conv(k, ch, co, s))
        ch = co
    w = arch["input_length"]
    for k, _, s in arch["stem"]:
        w = out_width(w, k, s)
    w -= 2 * (arch["block"] - 1)
    for k, _, s in arch["tail"]:
        w = out_width(w, k, s)
    flat = w * ch

    heads = []
    for _ in range(2):
        hid = AdderDenseLayer(_init_weights(rng, (flat, hidden), flat), relu=True, bn=BnParams.identity(hidden))
        out_bn = BnParams.identity(1)
        out_bn.beta[:] = 2.0  # centre of the training lifetime range
        heads.append([hid, AdderDenseLayer(_init_weights(rng, (hidden, 1), hidden), relu=False, bn=out_bn)])
    return NetworkModel(variant, arch["input_length"], stem, block, tail, heads, gate)
