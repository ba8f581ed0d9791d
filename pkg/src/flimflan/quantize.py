"""Linear fixed-point quantization.

A real ``x`` is stored as the integer word ``round(x * 2**F)`` in a two's-
complement field of ``integer_bits + F`` bits (sign included in the integer
bits). Rounding is half away from zero; out-of-range values saturate.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class QFormat:
    integer_bits: int
    fraction_bits: int
    signed: bool = True
    saturate: bool = True

    def __post_init__(self):
        if self.integer_bits < 1:
            raise ValueError("integer_bits must be >= 1")
        if self.fraction_bits < 0:
            raise ValueError("fraction_bits must be >= 0")
        if not self.signed:
            raise ValueError("only signed formats are supported")
        if self.width > 62:
            raise ValueError("word width above 62 bits is not supported")

    @property
    def width(self) -> int:
        return self.integer_bits + self.fraction_bits

    @property
    def min_word(self) -> int:
        return -(1 << (self.width - 1))

    @property
    def max_word(self) -> int:
        return (1 << (self.width - 1)) - 1

    @property
    def resolution(self) -> float:
        return 2.0 ** -self.fraction_bits

    @property
    def byte_width(self) -> int:
        return (self.width + 7) // 8

    def __str__(self):
        return f"Q{self.integer_bits}.{self.fraction_bits}"

    @classmethod
    def parse(cls, text: str) -> "QFormat":
        """Parse ``"Q16.16"`` or ``"16.16"``."""
        body = text.strip().lstrip("Qq")
        i, f = body.split(".")
        return cls(int(i), int(f))


FEATURE_FORMAT = QFormat(16, 16)
PARAM_FORMAT = QFormat(10, 10)


@dataclass
class SaturationStats:
    total: int = 0
    saturated: int = 0

    @property
    def fraction(self) -> float:
        return self.saturated / self.total if self.total else 0.0


def round_half_away(v):
    v = np.asarray(v, dtype=np.float64)
    return np.copysign(np.floor(np.abs(v) + 0.5), v)


def _wrap(words: np.ndarray, fmt: QFormat) -> np.ndarray:
    span = 1 << fmt.width
    return ((words - fmt.min_word) % span) + fmt.min_word


def narrow(words, fmt: QFormat, stats: SaturationStats | None = None) -> np.ndarray:
    """Fit integer words into ``fmt`` by saturation (or wrap if disabled)."""
    words = np.asarray(words, dtype=np.int64)
    over = (words > fmt.max_word) | (words < fmt.min_word)
    if stats is not None:
        stats.total += words.size
        stats.saturated += int(over.sum())
    if not over.any():
        return words
    if fmt.saturate:
        return np.clip(words, fmt.min_word, fmt.max_word)
    return _wrap(words, fmt)


def encode(x, fmt: QFormat, stats: SaturationStats | None = None):
    """Real value(s) to fixed-point word(s)."""
    scaled = round_half_away(np.asarray(x, dtype=np.float64) * 2.0**fmt.fraction_bits)
    lo, hi = float(fmt.min_word), float(fmt.max_word)
    # clip in float first so huge inputs cannot overflow int64
    clipped = np.clip(scaled, lo - 1, hi + 1).astype(np.int64)
    words = narrow(clipped, fmt, stats)
    return words if words.ndim else int(words)


def decode(w, fmt: QFormat):
    out = np.asarray(w, dtype=np.int64).astype(np.float64) * 2.0**-fmt.fraction_bits
    return out if out.ndim else float(out)


def shift_round(words, n: int) -> np.ndarray:
    """Arithmetic shift by ``n`` bits (right if positive) rounding half away from zero."""
    words = np.asarray(words, dtype=np.int64)
    if n <= 0:
        return words << (-n)
    half = np.int64(1) << (n - 1)
    mag = (np.abs(words) + half) >> n
    return np.where(words < 0, -mag, mag)


@dataclass
class FixedTensor:
    raw: np.ndarray
    format: QFormat

    def __post_init__(self):
        self.raw = np.asarray(self.raw, dtype=np.int64)
        if self.raw.size and (self.raw.min() < self.format.min_word or self.raw.max() > self.format.max_word):
            raise ValueError(f"words outside {self.format}")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.raw.shape

    @classmethod
    def from_real(cls, x, fmt: QFormat, stats: SaturationStats | None = None) -> "FixedTensor":
        return cls(np.asarray(encode(x, fmt, stats)), fmt)

    def to_real(self) -> np.ndarray:
        return decode(self.raw, self.format)


@dataclass
class QuantizedLayer:
    weights: FixedTensor
    scale: FixedTensor
    shift: FixedTensor


@dataclass
class QuantizedPlane:
    param_format: QFormat
    feature_format: QFormat
    layers: list[QuantizedLayer] = field(default_factory=list)
    stats: SaturationStats = field(default_factory=SaturationStats)


class SaturationError(ValueError):
    pass


def quantize_model(model, fm_fmt: QFormat = FEATURE_FORMAT, param_fmt: QFormat = PARAM_FORMAT,
                   max_saturation: float = 0.01):
    """Return a copy of ``model`` with its quantized parameter plane populated.

    Every layer must already carry folded (scale, shift) affine parameters.
    When a layer knows its expected pre-activation ``center`` (kept by
    folding), the shift is re-derived from the rounded scale so that
    ``scale_q * center + shift_q`` still lands on the float value. Adder sums
    have large means, and without this the scale rounding error times that
    mean shows up as an output offset.

    Raises :class:`SaturationError` if more than ``max_saturation`` of all
    parameters had to be clipped.
    """
    stats = SaturationStats()
    qlayers = []
    for layer in model.layers():
        if layer.bn is not None:
            raise ValueError("model has unfolded batch-norm layers; call fold() first")
        scale = FixedTensor.from_real(layer.scale, param_fmt, stats)
        shift = layer.shift
        if layer.center is not None:
            shift = shift + (layer.scale - scale.to_real()) * layer.center
        qlayers.append(QuantizedLayer(
            FixedTensor.from_real(layer.weights, param_fmt, stats),
            scale,
            FixedTensor.from_real(shift, param_fmt, stats),
        ))
    if stats.fraction > max_saturation:
        raise SaturationError(
            f"{stats.saturated}/{stats.total} parameters ({stats.fraction:.2%}) saturated in {param_fmt}"
        )
    return model.with_quantized(QuantizedPlane(param_fmt, fm_fmt, qlayers, stats))
