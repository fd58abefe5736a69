"""Linear post-training quantization and the hybrid analog/digital split.

A real tensor ``x`` with observed range ``[lo, hi]`` maps to ``n``-bit codes

    s  = (2**n - 1) / (hi - lo)
    zp = lo * s
    q  = clip(round(x * s - zp), 0, 2**n - 1)

and back via ``(q + zp) / s``. ``zp`` stays real so that ``q + zp`` recovers
``x * s`` up to rounding. A layer computes

    A   = sum over valid taps of (x_q + zp_x) * (w_q + zp_w)
    y_q = round(s_y / (s_x * s_w) * A)

with the integer parts of ``A`` (``sum x_q w_q``, ``sum x_q``, ``sum w_q``
and the tap count) accumulated exactly. Zero padding is a real 0, so padded
taps contribute nothing. In the hybrid split each input channel belongs to
one partition with its own weight bit width and ``(s_w, zp_w)``; partial
outputs are converted to real values, added, and rounded once.

Rounding is half-away-from-zero everywhere. The final rescale is exact: a
float64 estimate is used unless it lands within a guard band of a rounding
boundary, in which case that element is recomputed with rationals.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np

from . import container
from .nn import Network, apply_layer, im2col, is_param

ACCUM_FORMATS = ("exact", "fp16")


def round_half_away(x):
    """Round to nearest, ties away from zero (exact for float inputs)."""
    x = np.asarray(x, dtype=np.float64)
    t = np.trunc(x)
    return t + np.sign(x) * (np.abs(x - t) >= 0.5)


def _round_fraction(f: Fraction) -> int:
    a = abs(f)
    n = math.floor(a)
    if a - n >= Fraction(1, 2):
        n += 1
    return n if f >= 0 else -n


@dataclass(frozen=True)
class QuantParams:
    n: int
    s: float
    zp: float
    lo: float
    hi: float

    @property
    def qmax(self) -> int:
        return (1 << self.n) - 1

    def to_dict(self):
        return asdict(self)


def calibrate(t, n: int) -> QuantParams:
    """Scale and zero point over ``t``'s observed range.

    A constant tensor gets ``s = 1`` and ``zp = lo`` so every value maps to code 0.
    """
    if not 2 <= n <= 16:
        raise ValueError("bit width must lie in [2, 16]")
    t = np.asarray(t, dtype=np.float64)
    if t.size == 0:
        raise ValueError("cannot calibrate on an empty tensor")
    lo, hi = float(t.min()), float(t.max())
    return params_from_range(lo, hi, n)


def params_from_range(lo, hi, n) -> QuantParams:
    if not (np.isfinite(lo) and np.isfinite(hi)) or hi < lo:
        raise ValueError(f"bad range [{lo}, {hi}]")
    if hi == lo:
        return QuantParams(n, 1.0, lo, lo, hi)
    s = ((1 << n) - 1) / (hi - lo)
    return QuantParams(n, s, lo * s, lo, hi)


def quantize(x, qp: QuantParams) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if qp.hi == qp.lo:
        return np.zeros(x.shape, dtype=np.int64)
    return np.clip(round_half_away(x * qp.s - qp.zp), 0, qp.qmax).astype(np.int64)


def dequantize(q, qp: QuantParams) -> np.ndarray:
    return (np.asarray(q, dtype=np.float64) + qp.zp) / qp.s


# --------------------------------------------------------------------------
# integer accumulation


class AccumulatorOverflow(OverflowError):
    pass


def accumulator_bits(taps: int, x_bits: int, w_bits: int) -> int:
    """Signed accumulator width for ``taps`` products of unsigned codes (>= 32)."""
    bound = taps * ((1 << x_bits) - 1) * ((1 << w_bits) - 1)
    bits = bound.bit_length() + 1
    if bits > 64:
        raise AccumulatorOverflow(f"{taps} taps of {x_bits}x{w_bits}-bit products need {bits} bits")
    return max(32, bits)


def _int_matmul(a, b, bound):
    """Exact product of non-negative integer matrices."""
    if bound < 2 ** 53:
        return a.astype(np.float64) @ b.astype(np.float64)
    return (a.astype(np.int64) @ b.astype(np.int64)).astype(object)


@dataclass
class Terms:
    """Integer parts of one partition's accumulator, shaped (N, K) or broadcastable."""

    xw: np.ndarray   # sum x_q * w_q
    xs: np.ndarray   # sum x_q over valid taps
    ws: np.ndarray   # sum w_q over valid taps
    nv: np.ndarray   # number of valid taps
    qx: QuantParams
    qw: QuantParams
    exact: bool = True  # False when xw carries noise

    def real(self) -> np.ndarray:
        """``A / (s_x * s_w)``: the partition's real-valued partial output."""
        zx, zw = self.qx.zp, self.qw.zp
        a = self.xw + zw * self.xs + zx * self.ws + self.nv * (zx * zw)
        return a / (self.qx.s * self.qw.s)

    def magnitude(self) -> np.ndarray:
        zx, zw = abs(self.qx.zp), abs(self.qw.zp)
        a = np.abs(self.xw) + zw * np.abs(self.xs) + zx * np.abs(self.ws) + self.nv * (zx * zw)
        return a / (self.qx.s * self.qw.s)

    def exact_at(self, idx) -> Fraction:
        F = Fraction
        zx, zw = F(self.qx.zp), F(self.qw.zp)
        g = lambda arr: int(np.broadcast_to(arr, self.xw.shape)[idx])
        a = g(self.xw) + zw * g(self.xs) + zx * g(self.ws) + g(self.nv) * zx * zw
        return a / (F(self.qx.s) * F(self.qw.s))


def _patches(x_q, r, stride, padding):
    """Patch matrix, validity mask rows and output geometry for a conv."""
    cols, geom = im2col(x_q, r, stride, padding)
    ones = np.ones((1,) + x_q.shape[1:], dtype=np.float64)
    mask, _ = im2col(ones, r, stride, padding)
    return cols, mask, geom


def conv_terms(x_q, w_q, qx, qw, stride=1, padding=0, matmul=None) -> tuple[Terms, tuple]:
    """Integer accumulator parts for a conv over NHWC codes and (R,R,C,K) codes.

    ``matmul(cols, w2d)`` replaces the exact code product when given (the
    analog crossbar model plugs in here); it receives channel-major rows.
    """
    x_q = np.asarray(x_q)
    w_q = np.asarray(w_q)
    r, _, c, k = w_q.shape
    taps = r * r * c
    accumulator_bits(taps, qx.n, qw.n)
    cols, mask, geom = _patches(x_q.astype(np.float64), r, stride, padding)
    w2 = w_q.reshape(taps, k).astype(np.float64)
    bound = taps * qx.qmax * qw.qmax
    if matmul is None:
        xw = _int_matmul(cols, w2, bound)
        exact = True
    else:
        perm = np.arange(taps).reshape(r, r, c).transpose(2, 0, 1).ravel()
        xw = np.asarray(matmul(cols[:, perm], w2[perm]), dtype=np.float64)
        exact = False
    b, ho, wo = geom
    xs = cols.sum(axis=1, keepdims=True)
    ws = np.tile(mask @ w2, (b, 1))
    nv = np.tile(mask.sum(axis=1, keepdims=True), (b, 1))
    return Terms(xw, xs, ws, nv, qx, qw, exact), geom


def dense_terms(x_q, w_q, qx, qw, matmul=None) -> Terms:
    x4 = np.asarray(x_q).reshape(len(x_q), 1, 1, -1)
    w4 = np.asarray(w_q).reshape((1, 1) + np.shape(w_q))
    terms, _ = conv_terms(x4, w4, qx, qw, matmul=matmul)
    return terms


def round_rescale(parts: list[Terms], s_y: float, accum: str = "exact") -> np.ndarray:
    """``round(s_y * sum(part.real()))`` as int64 codes.

    ``"exact"`` adds the partials in real arithmetic and rounds once, exactly.
    ``"fp16"`` casts each partial to float16 and adds them in float16.
    """
    if accum not in ACCUM_FORMATS:
        raise ValueError(f"accum must be one of {ACCUM_FORMATS}")
    if not parts:
        raise ValueError("need at least one partition")
    if accum == "fp16":
        y = np.float16(0)
        for part in parts:
            y = (y + part.real().astype(np.float16)).astype(np.float16)
        return round_half_away(s_y * y.astype(np.float64)).astype(np.int64)

    v = s_y * sum(part.real() for part in parts)
    out = round_half_away(v)
    if all(part.exact for part in parts):
        mag = s_y * sum(part.magnitude() for part in parts)
        a = np.abs(v)
        guard = 1e-9 + 1e-12 * mag
        risky = np.argwhere(np.abs(a - np.floor(a) - 0.5) <= guard)
        for idx in map(tuple, risky):
            exact = Fraction(s_y) * sum(part.exact_at(idx) for part in parts)
            out[idx] = _round_fraction(exact)
    return out.astype(np.int64)


@dataclass
class QConvResult:
    codes: np.ndarray   # requantized output, NHWC
    xw: np.ndarray      # exact sum x_q * w_q
    acc_bits: int


def quantized_conv(x_q, w_q, qx: QuantParams, qw: QuantParams, s_y: float, stride=1, padding=0) -> QConvResult:
    """Integer conv plus single rescale-and-round of the output."""
    terms, (b, ho, wo) = conv_terms(x_q, w_q, qx, qw, stride, padding)
    codes = round_rescale([terms], s_y)
    k = np.shape(w_q)[3]
    bits = accumulator_bits(int(np.prod(np.shape(w_q)[:3])), qx.n, qw.n)
    return QConvResult(codes.reshape(b, ho, wo, k), np.asarray(terms.xw).astype(np.int64).reshape(b, ho, wo, k), bits)


def merge_partials(y_d, y_a, s_y, mode="sum-then-round"):
    """Combine two real partial outputs into output codes."""
    y_d = np.asarray(y_d, dtype=np.float64)
    y_a = np.asarray(y_a, dtype=np.float64)
    if mode == "sum-then-round":
        return round_half_away(s_y * (y_d + y_a))
    if mode == "round-then-sum":
        return round_half_away(s_y * y_d) + round_half_away(s_y * y_a)
    raise ValueError("mode must be 'sum-then-round' or 'round-then-sum'")


# --------------------------------------------------------------------------
# schemes


@dataclass
class LayerQuant:
    act: QuantParams
    digital: QuantParams | None
    analog: QuantParams | None
    s_y: float


@dataclass
class HybridQuantScheme:
    n1: int = 6
    n2: int = 8
    act_bits: int = 8
    shared: bool = False
    layers: list[LayerQuant] = field(default_factory=list)

    def __post_init__(self):
        for n in (self.n1, self.n2, self.act_bits):
            if not 2 <= n <= 16:
                raise ValueError("bit widths must lie in [2, 16]")

    def to_dict(self):
        def qp(p):
            return None if p is None else p.to_dict()

        return {
            "n1": self.n1, "n2": self.n2, "act_bits": self.act_bits, "shared": self.shared,
            "layers": [{"act": qp(l.act), "digital": qp(l.digital), "analog": qp(l.analog), "s_y": l.s_y}
                       for l in self.layers],
        }

    @classmethod
    def from_dict(cls, d):
        def qp(p):
            return None if p is None else QuantParams(**p)

        layers = [LayerQuant(qp(l["act"]), qp(l["digital"]), qp(l["analog"]), l["s_y"]) for l in d["layers"]]
        return cls(d["n1"], d["n2"], d["act_bits"], d["shared"], layers)


def activation_ranges(net: Network, inputs):
    """Observed (input range, output range) of every parameterized layer."""
    x = np.asarray(inputs, dtype=np.float64)
    out, p = [], 0
    for layer in net.layers:
        if is_param(layer):
            y = apply_layer(layer, x, np.asarray(net.weights[p], dtype=np.float64))
            out.append(((float(x.min()), float(x.max())), (float(y.min()), float(y.max()))))
            x, p = y, p + 1
        else:
            x = apply_layer(layer, x)
    return out


def _output_scale(lo, hi, bits):
    return 1.0 if hi == lo else ((1 << bits) - 1) / (hi - lo)


def calibrate_scheme(net: Network, assignment, calibration, n1=6, n2=8, act_bits=8, shared=False) -> HybridQuantScheme:
    """Per-layer parameters: activations from ``calibration`` inputs, weights
    per partition (or over the whole tensor when ``shared``)."""
    inputs = getattr(calibration, "inputs", calibration)
    ranges = activation_ranges(net, inputs)
    layers = []
    for p, w in enumerate(net.weights):
        (xlo, xhi), (ylo, yhi) = ranges[p]
        act = params_from_range(xlo, xhi, act_bits)
        mask = _digital_weight_mask(net, assignment, p)
        digital = analog = None
        if shared:
            if mask.any():
                digital = calibrate(w, n2)
            if (~mask).any():
                analog = calibrate(w, n1)
        else:
            if mask.any():
                digital = calibrate(w[mask], n2)
            if (~mask).any():
                analog = calibrate(w[~mask], n1)
        layers.append(LayerQuant(act, digital, analog, _output_scale(ylo, yhi, act_bits)))
    return HybridQuantScheme(n1, n2, act_bits, shared, layers)


def calibrate_uniform(net: Network, calibration, n=8, act_bits=8) -> HybridQuantScheme:
    """Single-partition scheme: every weight of a layer shares one ``(s_w, zp_w)``."""
    inputs = getattr(calibration, "inputs", calibration)
    layers = []
    for p, ((xlo, xhi), (ylo, yhi)) in enumerate(activation_ranges(net, inputs)):
        layers.append(LayerQuant(params_from_range(xlo, xhi, act_bits), calibrate(net.weights[p], n), None,
                                 _output_scale(ylo, yhi, act_bits)))
    return HybridQuantScheme(n, n, act_bits, True, layers)


def _digital_weight_mask(net, assignment, p):
    if assignment is None:
        return np.zeros(net.weights[p].shape, dtype=bool)
    return np.asarray(assignment.weight_mask(net, p), dtype=bool)


def _channel_split(net, assignment, p):
    c = net.channel_counts()[p]
    if assignment is None:
        return np.array([], dtype=np.int64), np.arange(c)
    m = np.asarray(assignment.masks[p], dtype=bool)
    if len(m) != c:
        raise ValueError(f"layer {p}: assignment has {len(m)} channels, layer has {c}")
    return np.flatnonzero(m), np.flatnonzero(~m)


def _as4(layer, x, w):
    """View dense layers as 1x1 convs over a 1x1 image."""
    if w.ndim == 2:
        return x.reshape(len(x), 1, 1, -1), w.reshape((1, 1) + w.shape), 1, 0
    return x, w, layer.stride, layer.padding


def _noisy_terms(x_q, w_q, qx, qw, sigma, rng, stride, padding):
    """Accumulator parts with value-proportional noise on ``w_q + zp_w``."""
    r, _, c, k = w_q.shape
    cols, mask, (b, ho, wo) = _patches(x_q.astype(np.float64), r, stride, padding)
    weff = (w_q.reshape(-1, k) + qw.zp) * (1.0 + sigma * rng.standard_normal((r * r * c, k)))
    a = cols @ weff + qx.zp * np.tile(mask @ weff, (b, 1))
    # fold the real accumulator into xw with zero zero-points so Terms.real() reproduces it
    z = QuantParams(qw.n, qw.s, 0.0, qw.lo, qw.hi)
    zx = QuantParams(qx.n, qx.s, 0.0, qx.lo, qx.hi)
    return Terms(a, 0.0, 0.0, 0.0, zx, z, exact=False), (b, ho, wo)


def _layer_parts(x_q, w, stride, padding, lq: LayerQuant, dig, ana, *, noise, rng, analog_matmul, n1):
    parts, geom = [], None
    for chans, qw, side in ((dig, lq.digital, "digital"), (ana, lq.analog, "analog")):
        if len(chans) == 0:
            continue
        x_sub = x_q[..., chans]
        w_sub = np.take(w, chans, axis=2)
        w_codes = quantize(w_sub, qw)
        sigma = 0.0 if noise is None else (noise.sigma_digital if side == "digital" else noise.sigma_analog)
        if side == "analog" and analog_matmul is not None:
            bias = 1 << (n1 - 1)

            def mm(cols, w2, _bias=bias):
                return analog_matmul(cols, w2.astype(np.int64) - _bias) + _bias * cols.sum(axis=1, keepdims=True)

            terms, geom = conv_terms(x_sub, w_codes, lq.act, qw, stride, padding, matmul=mm)
        elif sigma > 0:
            terms, geom = _noisy_terms(x_sub, w_codes, lq.act, qw, sigma, rng, stride, padding)
        else:
            terms, geom = conv_terms(x_sub, w_codes, lq.act, qw, stride, padding)
        parts.append(terms)
    return parts, geom


def hybrid_forward(net: Network, assignment, scheme: HybridQuantScheme, inputs, accum="exact", *,
                   noise=None, rng=None, analog_matmul=None) -> np.ndarray:
    """Quantized logits with each layer split into digital and analog partitions.

    ``noise`` (a NoiseModel) perturbs ``w_q + zp_w`` per partition with
    ``rng``; ``analog_matmul(cols, signed_codes)`` routes the analog
    partition's code product through a crossbar model instead.
    """
    if len(scheme.layers) != len(net.weights):
        raise ValueError("scheme does not match the network's parameterized layers")
    if noise is not None and rng is None:
        raise ValueError("noise requires an rng")
    x = np.asarray(getattr(inputs, "inputs", inputs), dtype=np.float64)
    p = 0
    for layer in net.layers:
        if not is_param(layer):
            x = apply_layer(layer, x)
            continue
        lq = scheme.layers[p]
        dig, ana = _channel_split(net, assignment, p)
        x_q = quantize(x, lq.act)
        x4, w4, stride, pad = _as4(layer, x_q, np.asarray(net.weights[p], dtype=np.float64))
        parts, (b, ho, wo) = _layer_parts(x4, w4, stride, pad, lq, dig, ana, noise=noise, rng=rng,
                                          analog_matmul=analog_matmul, n1=scheme.n1)
        y_q = round_rescale(parts, lq.s_y, accum).reshape(b, ho, wo, -1)
        y = y_q / lq.s_y
        x = y.reshape(len(y), -1) if np.ndim(net.weights[p]) == 2 else y
        p += 1
    return x


def uniform_forward(net: Network, scheme: HybridQuantScheme, inputs) -> np.ndarray:
    """Quantized logits with one weight partition per layer."""
    x = np.asarray(getattr(inputs, "inputs", inputs), dtype=np.float64)
    p = 0
    for layer in net.layers:
        if not is_param(layer):
            x = apply_layer(layer, x)
            continue
        lq = scheme.layers[p]
        qw = lq.digital
        x_q = quantize(x, lq.act)
        w = np.asarray(net.weights[p], dtype=np.float64)
        x4, w4, stride, pad = _as4(layer, x_q, w)
        terms, (b, ho, wo) = conv_terms(x4, quantize(w4, qw), lq.act, qw, stride, pad)
        y = round_rescale([terms], lq.s_y).reshape(b, ho, wo, -1) / lq.s_y
        x = y.reshape(len(y), -1) if w.ndim == 2 else y
        p += 1
    return x


def quantized_accuracy(logits, labels) -> float:
    return float(np.mean(np.argmax(logits, axis=1) == np.asarray(labels)))


def cell_savings(n1: int, bits_per_cell: int = 2, reference_bits: int = 8) -> Fraction:
    """Analog cells per weight at ``reference_bits`` over cells at ``n1`` bits."""
    if n1 < 1 or bits_per_cell < 1:
        raise ValueError("bit widths must be >= 1")
    return Fraction(-(-reference_bits // bits_per_cell), -(-n1 // bits_per_cell))


def analog_cells(net: Network, assignment, n1: int, bits_per_cell: int = 2) -> int:
    """Cells needed to store every analog-assigned weight at ``n1`` bits."""
    per = -(-n1 // bits_per_cell)
    total = 0
    for p in range(len(net.weights)):
        total += int((~_digital_weight_mask(net, assignment, p)).sum()) * per
    return total


def save_quantized(path, net: Network, scheme: HybridQuantScheme, assignment=None):
    blobs = {}
    for p, lq in enumerate(scheme.layers):
        mask = _digital_weight_mask(net, assignment, p)
        w = net.weights[p]
        if lq.digital is not None:
            blobs[f"digital{p}"] = np.where(mask, quantize(w, lq.digital), 0).astype(np.int64)
        if lq.analog is not None:
            blobs[f"analog{p}"] = np.where(mask, 0, quantize(w, lq.analog)).astype(np.int64)
        blobs[f"mask{p}"] = mask.astype(np.uint8)
    meta = {"scheme": scheme.to_dict(), "layers": len(scheme.layers)}
    container.write(path, "quantized", meta, blobs)


def load_quantized(path):
    meta, arrays = container.read(path, "quantized")
    return HybridQuantScheme.from_dict(meta["scheme"]), arrays


def scheme_json(scheme: HybridQuantScheme) -> str:
    return json.dumps(scheme.to_dict(), sort_keys=True, indent=2)
