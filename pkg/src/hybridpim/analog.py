"""Bit-sliced crossbar model with per-bitline ADCs.

Signed ``n``-bit weight codes live on crossbar rows (one row per input
channel tap, channel-major) and ``ceil(n / w)`` adjacent columns per weight,
most significant slice first. Two mappings are supported:

* ``offset``: store ``code + 2**(n-1)`` so every cell is unsigned, then
  subtract ``2**(n-1) * sum(x)`` digitally;
* ``differential``: positive and negative parts on two crossbars, outputs
  subtracted.

Inputs stream ``v`` bits per cycle, LSB first. Every read activates up to
``r`` rows; each bitline sum goes through an ideal uniform ADC spanning the
worst-case range ``r * (2**w - 1) * (2**v - 1)`` and is clipped to it.
Results are rebuilt by shift-and-add over slices and input cycles.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

MAPPINGS = ("offset", "differential")
ADC_PARTS = ("memory", "clock", "vref", "cdac")
LINEAR_PARTS = ("memory", "clock", "vref")


def adc_bits(v: int, w: int, r: int, encoding_saves_bit: bool = True) -> int:
    """Resolution needed to read ``r`` rows of ``w``-bit cells driven by ``v``-bit inputs."""
    if min(v, w, r) < 1:
        raise ValueError("v, w and r must be >= 1")
    lg = math.ceil(math.log2(r))
    bits = v + w + lg if v > 1 and w > 1 else v + w + lg - 1
    return bits - 1 if encoding_saves_bit else bits


@dataclass(frozen=True)
class CrossbarConfig:
    rows: int = 128
    cols: int = 128
    bits_per_cell: int = 2
    input_bits_per_cycle: int = 1
    active_rows: int = 128
    mapping: str = "offset"
    encoding_saves_bit: bool = True
    sigma: float = 0.0
    r_ratio_scale: float = 1.0
    weight_bits: int = 6
    input_bits: int = 8
    adc_bits: int | None = None  # None: full resolution for this geometry

    def __post_init__(self):
        if self.mapping not in MAPPINGS:
            raise ValueError(f"mapping must be one of {MAPPINGS}")
        if min(self.rows, self.cols, self.bits_per_cell, self.input_bits_per_cycle, self.active_rows) < 1:
            raise ValueError("crossbar dimensions and bit counts must be >= 1")
        if self.active_rows > self.rows:
            raise ValueError(f"active_rows {self.active_rows} exceeds rows {self.rows}")
        if self.sigma < 0 or self.r_ratio_scale <= 0:
            raise ValueError("sigma must be >= 0 and r_ratio_scale > 0")

    @property
    def slices(self) -> int:
        return -(-self.weight_bits // self.bits_per_cell)

    @property
    def cycles(self) -> int:
        return -(-self.input_bits // self.input_bits_per_cycle)

    @property
    def effective_sigma(self) -> float:
        return self.sigma / self.r_ratio_scale

    @property
    def resolved_adc_bits(self) -> int:
        if self.adc_bits is not None:
            return self.adc_bits
        return adc_bits(self.input_bits_per_cycle, self.bits_per_cell, self.active_rows, self.encoding_saves_bit)

    @property
    def functional_adc_bits(self) -> int:
        """Levels the quantizer actually resolves; the encoding flag is worth one bit."""
        return self.resolved_adc_bits + (1 if self.encoding_saves_bit else 0)

    @property
    def full_scale(self) -> int:
        return self.active_rows * ((1 << self.bits_per_cell) - 1) * ((1 << self.input_bits_per_cycle) - 1)

    def with_(self, **kw) -> "CrossbarConfig":
        return replace(self, **kw)


# --------------------------------------------------------------------------
# ADC cost scaling


@dataclass(frozen=True)
class ADCSpec:
    bits: int
    area: float = 1.0
    power: float = 1.0
    breakdown: dict = field(default_factory=lambda: {"memory": 0.25, "clock": 0.25, "vref": 0.25, "cdac": 0.25})
    power_breakdown: dict | None = None  # defaults to ``breakdown``

    def __post_init__(self):
        if self.bits < 1:
            raise ValueError("ADC bits must be >= 1")
        for shares in (self.breakdown, self.power_breakdown):
            if shares is None:
                continue
            if set(shares) != set(ADC_PARTS):
                raise ValueError(f"breakdown must name exactly {ADC_PARTS}")
            if abs(sum(shares.values()) - 1) > 1e-6 or min(shares.values()) < 0:
                raise ValueError("breakdown shares must be >= 0 and sum to 1")

    @property
    def power_shares(self):
        return self.power_breakdown or self.breakdown


def scale_factor(shares: dict, b0: int, b: int) -> float:
    """Linear parts scale by ``b/b0``, the capacitive DAC by ``2**(b-b0)``."""
    lin = sum(shares[k] for k in LINEAR_PARTS)
    return lin * (b / b0) + shares["cdac"] * 2.0 ** (b - b0)


def adc_scale(base: ADCSpec, bits: int) -> ADCSpec:
    if bits > base.bits:
        raise ValueError(f"cannot scale a {base.bits}-bit ADC up to {bits} bits")
    if bits < 1:
        raise ValueError("ADC bits must be >= 1")
    fa = scale_factor(base.breakdown, base.bits, bits)
    fp = scale_factor(base.power_shares, base.bits, bits)

    def reshare(shares, factor):
        lin, dac = bits / base.bits, 2.0 ** (bits - base.bits)
        return {k: shares[k] * (dac if k == "cdac" else lin) / factor for k in ADC_PARTS}

    return ADCSpec(
        bits,
        base.area * fa,
        base.power * fp,
        reshare(base.breakdown, fa),
        None if base.power_breakdown is None else reshare(base.power_breakdown, fp),
    )


# --------------------------------------------------------------------------
# mapping


@dataclass
class CrossbarAllocation:
    """Cell codes for one layer's analog partition.

    ``cells`` has shape (M, K, S): rows, output columns, slices (MSB first).
    Differential mappings also fill ``neg_cells``. ``row_channels`` names the
    input channel of every row.
    """

    cells: np.ndarray
    neg_cells: np.ndarray | None
    row_channels: np.ndarray
    cfg: CrossbarConfig

    @property
    def rows_used(self) -> int:
        return self.cells.shape[0]

    @property
    def outputs(self) -> int:
        return self.cells.shape[1]

    @property
    def row_tiles(self) -> int:
        return -(-self.rows_used // self.cfg.rows) if self.rows_used else 0

    @property
    def col_tiles(self) -> int:
        return -(-(self.outputs * self.cfg.slices) // self.cfg.cols) if self.rows_used else 0

    @property
    def crossbars(self) -> int:
        n = self.row_tiles * self.col_tiles
        return 2 * n if self.neg_cells is not None else n

    @property
    def utilization(self) -> float:
        if not self.crossbars:
            return 0.0
        used = self.rows_used * self.outputs * self.cfg.slices * (2 if self.neg_cells is not None else 1)
        return used / (self.crossbars * self.cfg.rows * self.cfg.cols)

    def channel_rows(self):
        """``{channel: (first_row, last_row_exclusive)}``; channels occupy contiguous rows."""
        out = {}
        for i, c in enumerate(self.row_channels.tolist()):
            lo, _ = out.get(c, (i, i))
            out[c] = (lo, i + 1)
        return out

    def summary(self) -> dict:
        return {
            "rows_used": self.rows_used,
            "outputs": self.outputs,
            "slices": self.cfg.slices,
            "row_tiles": self.row_tiles,
            "col_tiles": self.col_tiles,
            "crossbars": self.crossbars,
            "utilization": self.utilization,
            "mapping": self.cfg.mapping,
        }

    def to_json(self) -> str:
        return json.dumps(self.summary(), sort_keys=True, indent=2)


def slice_codes(u, n_bits, w):
    """Unsigned codes -> (…, S) slices, most significant first."""
    u = np.asarray(u, dtype=np.int64)
    s = -(-n_bits // w)
    shifts = w * np.arange(s - 1, -1, -1)
    return (u[..., None] >> shifts) & ((1 << w) - 1)


def map_layer(weights, cfg: CrossbarConfig, row_channels=None) -> CrossbarAllocation:
    """Map signed codes of shape (M, K) (rows channel-major) onto crossbars."""
    w = np.asarray(weights, dtype=np.int64)
    if w.ndim != 2:
        raise ValueError("weights must be a 2-D (rows, outputs) array of signed codes")
    n = cfg.weight_bits
    lo, hi = -(1 << (n - 1)), (1 << (n - 1)) - 1
    if w.size and (w.min() < lo or w.max() > hi):
        raise ValueError(f"weight codes outside the signed {n}-bit range [{lo}, {hi}]")
    row_channels = np.arange(len(w)) if row_channels is None else np.asarray(row_channels)
    if cfg.mapping == "offset":
        return CrossbarAllocation(slice_codes(w + (1 << (n - 1)), n, cfg.bits_per_cell), None, row_channels, cfg)
    pos = slice_codes(np.maximum(w, 0), n, cfg.bits_per_cell)
    neg = slice_codes(np.maximum(-w, 0), n, cfg.bits_per_cell)
    return CrossbarAllocation(pos, neg, row_channels, cfg)


def conv_rows(r: int, channels) -> np.ndarray:
    """Channel id of every crossbar row for an R x R kernel over ``channels``."""
    return np.repeat(np.asarray(channels), r * r)


# --------------------------------------------------------------------------
# evaluation


def program(cells, cfg: CrossbarConfig, rng=None) -> np.ndarray:
    """Programmed conductances in code units with value-proportional variation."""
    g = cells.astype(np.float64)
    sigma = cfg.effective_sigma
    if sigma > 0:
        if rng is None:
            raise ValueError("a noisy crossbar needs an rng")
        g = np.maximum(g * (1.0 + sigma * rng.standard_normal(g.shape)), 0.0)
    return g


def adc_read(current, cfg: CrossbarConfig, bits=None):
    """Ideal uniform quantizer over ``[0, full_scale]`` with ``2**bits - 1`` steps."""
    levels = (1 << (cfg.functional_adc_bits if bits is None else bits)) - 1
    fs = cfg.full_scale
    if fs <= levels:
        return np.clip(np.floor(current + 0.5), 0, fs)
    step = fs / levels
    return np.clip(np.floor(current / step + 0.5), 0, levels) * step


def _bitline_sums(g, x, cfg, adc):
    """Shift-and-add of ADC reads over input cycles and row groups: (N, K, S)."""
    m = g.shape[0]
    n = x.shape[0]
    v = cfg.input_bits_per_cycle
    out = np.zeros((n,) + g.shape[1:], dtype=np.float64)
    flat = g.reshape(m, -1)
    groups = []
    for t0 in range(0, m, cfg.rows):
        t1 = min(m, t0 + cfg.rows)
        groups.extend((a, min(t1, a + cfg.active_rows)) for a in range(t0, t1, cfg.active_rows))
    for cyc in range(cfg.cycles):
        bits = ((x >> (v * cyc)) & ((1 << v) - 1)).astype(np.float64)
        acc = np.zeros((n, flat.shape[1]))
        for a, b in groups:
            cur = bits[:, a:b] @ flat[a:b]
            acc += cur if adc is False else adc_read(cur, cfg, adc)
        out += (acc * float(1 << (v * cyc))).reshape(out.shape)
    return out


def _combine_slices(sums, cfg):
    w = cfg.bits_per_cell
    s = sums.shape[-1]
    weights = np.array([float(1 << (w * (s - 1 - j))) for j in range(s)])
    return sums @ weights


def analog_matvec(alloc: CrossbarAllocation, x_q, rng=None, *, adc=None) -> np.ndarray:
    """Signed matvec ``x_q @ W`` through the crossbar model, shape (N, K).

    ``adc`` overrides the quantizer resolution in bits; ``False`` disables
    the ADC (ideal analog read).
    """
    cfg = alloc.cfg
    x = np.asarray(x_q, dtype=np.int64)
    if x.ndim == 1:
        return analog_matvec(alloc, x[None], rng, adc=adc)[0]
    if x.shape[1] != alloc.rows_used:
        raise ValueError(f"input has {x.shape[1]} rows, allocation has {alloc.rows_used}")
    if x.size and (x.min() < 0 or x.max() >= (1 << cfg.input_bits)):
        raise ValueError(f"inputs must be unsigned {cfg.input_bits}-bit codes")
    if alloc.rows_used == 0:
        return np.zeros((len(x), alloc.outputs))
    bits = None if adc is None else adc
    pos = _combine_slices(_bitline_sums(program(alloc.cells, cfg, rng), x, cfg, bits), cfg)
    if alloc.neg_cells is not None:
        neg = _combine_slices(_bitline_sums(program(alloc.neg_cells, cfg, rng), x, cfg, bits), cfg)
        return pos - neg
    return pos - float(1 << (cfg.weight_bits - 1)) * x.sum(axis=1, keepdims=True)


def crossbar_matmul(cfg: CrossbarConfig, rng=None, adc=None):
    """``matmul(cols, signed_codes)`` hook for the quantized forward pass."""

    def mm(cols, w_signed):
        alloc = map_layer(w_signed, cfg)
        return analog_matvec(alloc, np.asarray(cols, dtype=np.int64), rng, adc=adc)

    return mm


def bitline_capacity(alloc: CrossbarAllocation) -> np.ndarray:
    """Largest accumulable value per bitline in one read: active rows times max cell code."""
    cfg = alloc.cfg
    per_xbar = []
    for t0 in range(0, alloc.rows_used, cfg.rows):
        rows = min(cfg.rows, alloc.rows_used - t0)
        per_xbar.append(min(rows, cfg.active_rows) * ((1 << cfg.bits_per_cell) - 1) * ((1 << cfg.input_bits_per_cycle) - 1))
    return np.array(per_xbar)


def debug_trace_csv(alloc: CrossbarAllocation, x_q, rng=None) -> str:
    """Per-bitline reads for a single input vector: cycle, group, column, slice, current, adc."""
    cfg = alloc.cfg
    x = np.asarray(x_q, dtype=np.int64).ravel()
    g = program(alloc.cells, cfg, rng)
    lines = ["cycle,row_start,output,slice,current,adc"]
    v = cfg.input_bits_per_cycle
    for cyc in range(cfg.cycles):
        bits = ((x >> (v * cyc)) & ((1 << v) - 1)).astype(np.float64)
        for a in range(0, alloc.rows_used, cfg.active_rows):
            b = min(alloc.rows_used, a + cfg.active_rows)
            cur = np.tensordot(bits[a:b], g[a:b], axes=1)
            q = adc_read(cur, cfg)
            for k in range(cur.shape[0]):
                for s in range(cur.shape[1]):
                    lines.append(f"{cyc},{a},{k},{s},{cur[k, s]!r},{q[k, s]!r}")
    return "\n".join(lines) + "\n"


def allocation_summary(allocs) -> dict:
    per = [a.summary() for a in allocs]
    total = sum(p["crossbars"] for p in per)
    cells = sum(a.rows_used * a.outputs * a.cfg.slices * (2 if a.neg_cells is not None else 1) for a in allocs)
    cap = sum(a.crossbars * a.cfg.rows * a.cfg.cols for a in allocs)
    return {"layers": per, "crossbars": total, "utilization": cells / cap if cap else 0.0}


def to_dict(cfg: CrossbarConfig) -> dict:
    return asdict(cfg)
