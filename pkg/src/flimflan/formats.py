"""Binary containers: datasets (FLDS), models (FLNM) and exported parameters (FLNP).

All multi-byte fields are little-endian and every file starts with a 4-byte
magic followed by a u16 version. Readers reject unknown magics and versions.

FLDS v1
    magic "FLDS" | version u16 | num_bins u16 | bin_width_fs u32 |
    record_count u32 | label_format u8
    then per record: counts u16[num_bins] | tau_a f32 | tau_i f32 |
    n_components u8 | (a f32, tau f32) * n_components

    The bin width is stored in femtoseconds so 39.06 ps survives exactly.

FLNP v1
    magic "FLNP" | version u16 | layer_count u8
    then per layer: kind u8 (0 conv, 1 dense) | K_x u8 | CH_i u16 | CH_o u16 |
    stride u8 | int_bits u8 | frac_bits u8 | weights | scale | shift
    Words are signed two's complement in ceil((int_bits + frac_bits) / 8)
    bytes. Conv weights are ordered (K_x, CH_i, CH_o), dense (CH_i, CH_o).

FLNM v1
    magic "FLNM" | version u16 | variant_len u8 | variant ascii |
    descriptor_len u32 | descriptor json | float params f32 per layer
    (weights, scale, shift, then center when the descriptor flags it; layer
    order of NetworkModel.layers()) |
    has_quantized u8 | [fm_int u8 | fm_frac u8 | plane_len u32 | FLNP bytes]
"""
from __future__ import annotations

import io
import json
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .decay import DecayParams, Histogram, LabeledDecay, LifetimePair
from .network import AdderConvLayer, AdderDenseLayer, NetworkModel
from .quantize import FixedTensor, QFormat, QuantizedLayer, QuantizedPlane

DATASET_MAGIC = b"FLDS"
MODEL_MAGIC = b"FLNM"
PARAMS_MAGIC = b"FLNP"
VERSION = 1
LABEL_TAU_PAIR = 1


class FormatError(ValueError):
    """File content does not match the expected container layout."""


def atomic_write(path, data: bytes | str) -> None:
    """Write to a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode) as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, data: bytes):
        self.buf = memoryview(data)
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError("unexpected end of file")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return bytes(out)

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        vals = struct.unpack(fmt, self.take(size))
        return vals if len(vals) > 1 else vals[0]

    def array(self, dtype, n: int) -> np.ndarray:
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(dt.itemsize * n), dtype=dt).copy()

    def done(self) -> bool:
        return self.pos == len(self.buf)


def _check_header(r: _Reader, magic: bytes) -> int:
    got = r.take(4)
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}")
    version = r.unpack("<H")
    if version != VERSION:
        raise FormatError(f"unsupported {magic.decode()} version {version}")
    return version


# --------------------------------------------------------------------------
# datasets
# --------------------------------------------------------------------------

@dataclass
class DatasetFile:
    counts: np.ndarray  # (n, bins) int64
    labels: np.ndarray  # (n, 2) float64 (stored as binary32)
    components: list[tuple[tuple[float, float], ...]]
    bin_width: float  # ns
    bin_edges: np.ndarray | None = None

    def __len__(self):
        return self.counts.shape[0]

    @property
    def num_bins(self) -> int:
        return self.counts.shape[1]

    def records(self) -> list[LabeledDecay]:
        """Rebuild records; peak counts are not stored and are taken from the data."""
        out = []
        for c, lab, comp in zip(self.counts, self.labels, self.components):
            params = DecayParams(_renormalized(comp), max(float(c.max()), 1.0))
            out.append(LabeledDecay(Histogram(c, self.bin_width, self.bin_edges),
                                    LifetimePair(float(lab[0]), float(lab[1])), params))
        return out

    @classmethod
    def from_records(cls, records, bin_edges=None) -> "DatasetFile":
        counts = np.stack([r.histogram.counts for r in records]).astype(np.int64)
        labels = np.array([[r.label.tau_a, r.label.tau_i] for r in records], dtype=np.float64)
        comps = [r.params.components for r in records]
        return cls(counts, labels, comps, records[0].histogram.bin_width, bin_edges)


def _renormalized(comp):
    # binary32 storage perturbs the amplitude sum; restore it exactly
    amps = [a for a, _ in comp]
    total = sum(amps)
    if len(comp) == 1:
        return ((1.0, comp[0][1]),)
    fixed = [a / total for a in amps[:-1]]
    fixed.append(1.0 - sum(fixed))
    return tuple((max(a, 0.0), t) for a, (_, t) in zip(fixed, comp))


def encode_dataset(ds: DatasetFile) -> bytes:
    n, bins = ds.counts.shape
    if bins > 0xFFFF:
        raise FormatError("too many bins for u16 header field")
    if ds.counts.size and (ds.counts.min() < 0 or ds.counts.max() > 0xFFFF):
        raise FormatError("counts do not fit in u16")
    width_fs = int(round(ds.bin_width * 1e6))
    out = io.BytesIO()
    out.write(DATASET_MAGIC)
    out.write(struct.pack("<HHIIB", VERSION, bins, width_fs, n, LABEL_TAU_PAIR))
    for c, lab, comp in zip(ds.counts, ds.labels, ds.components):
        out.write(np.asarray(c, dtype="<u2").tobytes())
        out.write(struct.pack("<ffB", lab[0], lab[1], len(comp)))
        for a, t in comp:
            out.write(struct.pack("<ff", a, t))
    return out.getvalue()


def decode_dataset(data: bytes) -> DatasetFile:
    r = _Reader(data)
    _check_header(r, DATASET_MAGIC)
    bins, width_fs, n, label_format = r.unpack("<HIIB")
    if label_format != LABEL_TAU_PAIR:
        raise FormatError(f"unknown label format {label_format}")
    counts = np.empty((n, bins), dtype=np.int64)
    labels = np.empty((n, 2))
    comps = []
    for i in range(n):
        counts[i] = r.array("<u2", bins)
        labels[i] = r.unpack("<ff")
        k = r.unpack("<B")
        comps.append(tuple(r.unpack("<ff") for _ in range(k)))
    if not r.done():
        raise FormatError("trailing bytes after last record")
    return DatasetFile(counts, labels, comps, width_fs * 1e-6)


def write_dataset(path, ds: DatasetFile, edges_path=None) -> None:
    atomic_write(path, encode_dataset(ds))
    if ds.bin_edges is not None:
        atomic_write(edges_path or edges_sidecar(path), "".join(f"{e}\n" for e in ds.bin_edges))


def edges_sidecar(path) -> Path:
    return Path(str(path) + ".edges")


def read_dataset(path) -> DatasetFile:
    ds = decode_dataset(Path(path).read_bytes())
    side = edges_sidecar(path)
    if side.exists():
        ds.bin_edges = np.array([int(x) for x in side.read_text().split()], dtype=np.int64)
        if ds.bin_edges.size != ds.num_bins + 1:
            raise FormatError("edges sidecar does not match dataset bin count")
    return ds


def dataset_to_text(ds: DatasetFile) -> str:
    """One line per record: comma-separated counts, a semicolon, then tau_a,tau_i."""
    lines = []
    for c, lab in zip(ds.counts, ds.labels):
        lines.append(",".join(str(int(v)) for v in c) + f";{lab[0]:.6g},{lab[1]:.6g}")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# exported parameters
# --------------------------------------------------------------------------

_KIND_CODES = {"conv": 0, "dense": 1}


def _pack_words(words: np.ndarray, nbytes: int) -> bytes:
    raw = np.ascontiguousarray(words, dtype="<i8").reshape(-1).view(np.uint8).reshape(-1, 8)
    return raw[:, :nbytes].tobytes()


def _unpack_words(r: _Reader, n: int, nbytes: int) -> np.ndarray:
    raw = np.frombuffer(r.take(n * nbytes), dtype=np.uint8).reshape(n, nbytes).astype(np.int64)
    val = np.zeros(n, dtype=np.int64)
    for i in range(nbytes):
        val |= raw[:, i] << (8 * i)
    sign = np.int64(1) << (8 * nbytes - 1)
    return np.where(val >= sign, val - (sign << 1), val)


def encode_params(model: NetworkModel) -> bytes:
    plane = model.quantized
    if plane is None:
        raise ValueError("model has no quantized plane")
    layers = model.layers()
    if len(layers) > 0xFF:
        raise FormatError("too many layers for u8 count")
    pf = plane.param_format
    nb = pf.byte_width
    out = io.BytesIO()
    out.write(PARAMS_MAGIC)
    out.write(struct.pack("<HB", VERSION, len(layers)))
    for layer, q in zip(layers, plane.layers):
        out.write(struct.pack("<BBHHBBB", _KIND_CODES[layer.kind], layer.kernel, layer.in_channels,
                              layer.out_channels, layer.stride, pf.integer_bits, pf.fraction_bits))
        for t in (q.weights, q.scale, q.shift):
            out.write(_pack_words(t.raw, nb))
    return out.getvalue()


def decode_params(data: bytes) -> list[dict]:
    """Parse an FLNP blob into per-layer dicts of integer word arrays."""
    r = _Reader(data)
    _check_header(r, PARAMS_MAGIC)
    n = r.unpack("<B")
    out = []
    for _ in range(n):
        kind, k, ci, co, stride, ib, fb = r.unpack("<BBHHBBB")
        fmt = QFormat(ib, fb)
        nb = fmt.byte_width
        wshape = (k, ci, co) if kind == 0 else (ci, co)
        w = _unpack_words(r, int(np.prod(wshape)), nb).reshape(wshape)
        out.append(dict(kind="conv" if kind == 0 else "dense", kernel=k, in_channels=ci, out_channels=co,
                        stride=stride, format=fmt, weights=w, scale=_unpack_words(r, co, nb),
                        shift=_unpack_words(r, co, nb)))
    if not r.done():
        raise FormatError("trailing bytes in parameter blob")
    return out


# --------------------------------------------------------------------------
# models
# --------------------------------------------------------------------------

def _layer_desc(l):
    return dict(kind=l.kind, kernel=l.kernel, in_channels=l.in_channels, out_channels=l.out_channels,
                stride=l.stride, relu=bool(l.relu), center=l.center is not None)


def encode_model(model: NetworkModel) -> bytes:
    if any(l.bn is not None for l in model.layers()):
        model = model.fold() if model.quantized is None else model
        if any(l.bn is not None for l in model.layers()):
            raise ValueError("fold the model before saving a quantized plane")
    desc = dict(
        input_length=model.input_length,
        gate=model.gate,
        stem=[_layer_desc(l) for l in model.stem],
        block=[_layer_desc(l) for l in model.block],
        tail=[_layer_desc(l) for l in model.tail],
        heads=[[_layer_desc(l) for l in h] for h in model.heads],
    )
    blob = json.dumps(desc, sort_keys=True).encode()
    tag = model.variant.encode("ascii")
    out = io.BytesIO()
    out.write(MODEL_MAGIC)
    out.write(struct.pack("<HB", VERSION, len(tag)))
    out.write(tag)
    out.write(struct.pack("<I", len(blob)))
    out.write(blob)
    for l in model.layers():
        arrays = (l.weights, l.scale, l.shift) + ((l.center,) if l.center is not None else ())
        for arr in arrays:
            out.write(np.asarray(arr, dtype="<f4").tobytes())
    if model.quantized is None:
        out.write(struct.pack("<B", 0))
    else:
        fm = model.quantized.feature_format
        params = encode_params(model)
        out.write(struct.pack("<BBBI", 1, fm.integer_bits, fm.fraction_bits, len(params)))
        out.write(params)
    return out.getvalue()


def _build_layer(d, r):
    if d["kind"] == "conv":
        shape = (d["kernel"], d["in_channels"], d["out_channels"])
        cls = AdderConvLayer
    elif d["kind"] == "dense":
        shape = (d["in_channels"], d["out_channels"])
        cls = AdderDenseLayer
    else:
        raise FormatError(f"unknown layer kind {d['kind']!r}")
    w = r.array("<f4", int(np.prod(shape))).astype(np.float64).reshape(shape)
    scale = r.array("<f4", d["out_channels"]).astype(np.float64)
    shift = r.array("<f4", d["out_channels"]).astype(np.float64)
    center = r.array("<f4", d["out_channels"]).astype(np.float64) if d.get("center") else None
    return cls(w, stride=d["stride"], scale=scale, shift=shift, relu=d["relu"], center=center)


def decode_model(data: bytes) -> NetworkModel:
    r = _Reader(data)
    _check_header(r, MODEL_MAGIC)
    tag = r.take(r.unpack("<B")).decode("ascii")
    try:
        desc = json.loads(r.take(r.unpack("<I")).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt architecture descriptor: {exc}") from exc
    stem = [_build_layer(d, r) for d in desc["stem"]]
    block = [_build_layer(d, r) for d in desc["block"]]
    tail = [_build_layer(d, r) for d in desc["tail"]]
    heads = [[_build_layer(d, r) for d in h] for h in desc["heads"]]
    model = NetworkModel(tag, desc["input_length"], stem, block, tail, heads, desc["gate"])
    if r.unpack("<B"):
        fm_i, fm_f, n = r.unpack("<BBI")
        layers = decode_params(r.take(n))
        if len(layers) != len(model.layers()):
            raise FormatError("quantized plane does not match architecture")
        pf = layers[0]["format"] if layers else QFormat(10, 10)
        qlayers = [QuantizedLayer(FixedTensor(d["weights"], d["format"]), FixedTensor(d["scale"], d["format"]),
                                  FixedTensor(d["shift"], d["format"])) for d in layers]
        model = model.with_quantized(QuantizedPlane(pf, QFormat(fm_i, fm_f), qlayers))
    if not r.done():
        raise FormatError("trailing bytes after model")
    return model


def save_model(path, model: NetworkModel) -> None:
    atomic_write(path, encode_model(model))


def load_model(path) -> NetworkModel:
    return decode_model(Path(path).read_bytes())
