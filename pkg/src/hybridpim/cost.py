"""Area, power and energy accounting, efficiency metrics, load balance and data movement.

Component costs are configuration. The bundled synthetic table only fixes
relative magnitudes: the ADC entry is solved so that ADCs take a chosen
share of tile area and power, every other entry is a placeholder tagged
``user-config``.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction

import numpy as np

from .analog import ADCSpec, adc_scale

SCHEMES = ("hybridac", "hybridacdi", "ideal-isaac", "iws-1", "iws-2", "sre-like")
SOURCES = ("user-config", "paper-ratio", "reported")


@dataclass(frozen=True)
class ComponentCost:
    area: float    # mm^2
    power: float   # mW
    energy: float = 0.0  # pJ per operation
    source: str = "user-config"

    def __post_init__(self):
        if min(self.area, self.power, self.energy) < 0:
            raise ValueError("costs must be >= 0")
        if self.source not in SOURCES:
            raise ValueError(f"source must be one of {SOURCES}")


@dataclass
class ComponentCostTable:
    entries: dict[str, ComponentCost] = field(default_factory=dict)

    def __getitem__(self, name) -> ComponentCost:
        try:
            return self.entries[name]
        except KeyError:
            raise KeyError(f"cost table has no entry {name!r}") from None

    def scaled(self, factor: float) -> "ComponentCostTable":
        return ComponentCostTable({k: replace(v, area=v.area * factor, power=v.power * factor,
                                              energy=v.energy * factor) for k, v in self.entries.items()})

    def with_entry(self, name, cost: ComponentCost) -> "ComponentCostTable":
        return ComponentCostTable({**self.entries, name: cost})

    def to_dict(self):
        return {k: asdict(v) for k, v in sorted(self.entries.items())}

    @classmethod
    def from_dict(cls, d):
        return cls({k: ComponentCost(**v) for k, v in d.items()})


# components of one analog MCU and one tile, by count
MCU_PARTS = {"crossbar": 8, "adc": 8, "dac": 8 * 128, "sample_hold": 8 * 128, "shift_add": 4}
TILE_PARTS = {"edram": 1, "router": 1, "output_reg": 1, "quant": 1, "activation": 1, "maxpool": 1}
CHIP_PARTS = {"link": 1}
DIGITAL_PARTS = {"sram": 1, "mac": 24, "registers": 1}

# placeholder magnitudes (area mm^2, power mW), used only through ratios
_BASE = {
    "crossbar": (0.0002, 0.3),
    "dac": (1.67e-7, 0.0039),
    "sample_hold": (4e-8, 0.00001),
    "shift_add": (0.00006, 0.05),
    "edram": (0.083, 20.7),
    "router": (0.0378, 10.5),
    "output_reg": (0.00077, 1.68),
    "quant": (0.0005, 0.8),
    "activation": (0.0003, 0.26),
    "maxpool": (0.00024, 0.4),
    "link": (22.88, 10400.0),
    "sram": (0.0016, 0.9),
    "mac": (0.0009, 0.55),
    "registers": (0.0004, 0.3),
}


def tile_counts(mcus_per_tile: int = 12) -> dict:
    counts = {k: v * mcus_per_tile for k, v in MCU_PARTS.items()}
    counts.update(TILE_PARTS)
    return counts


def synthetic_table(adc_area_share=0.30, adc_power_share=0.50, mcus_per_tile=12) -> ComponentCostTable:
    """Placeholder table whose 8-bit ADC takes the given share of tile area and power."""
    if not (0 < adc_area_share < 1 and 0 < adc_power_share < 1):
        raise ValueError("shares must lie in (0, 1)")
    entries = {k: ComponentCost(a, p, 0.0, "user-config") for k, (a, p) in _BASE.items()}
    counts = tile_counts(mcus_per_tile)
    rest_area = sum(entries[k].area * n for k, n in counts.items() if k != "adc")
    rest_power = sum(entries[k].power * n for k, n in counts.items() if k != "adc")
    n_adc = counts["adc"]
    adc_area = adc_area_share / (1 - adc_area_share) * rest_area / n_adc
    adc_power = adc_power_share / (1 - adc_power_share) * rest_power / n_adc
    entries["adc"] = ComponentCost(adc_area, adc_power, 0.0, "paper-ratio")
    return ComponentCostTable(entries)


# DAC shares of the ADC breakdown used with the synthetic table (area, power)
DEFAULT_ADC_AREA_BREAKDOWN = {"memory": 2 / 9, "clock": 2 / 9, "vref": 2 / 9, "cdac": 1 / 3}
DEFAULT_ADC_POWER_BREAKDOWN = {"memory": 0.446 / 3, "clock": 0.446 / 3, "vref": 0.446 / 3, "cdac": 0.554}


def default_adc(bits=8, table: ComponentCostTable | None = None) -> ADCSpec:
    table = table or synthetic_table()
    return ADCSpec(bits, table["adc"].area, table["adc"].power, DEFAULT_ADC_AREA_BREAKDOWN,
                   DEFAULT_ADC_POWER_BREAKDOWN)


# --------------------------------------------------------------------------
# designs


@dataclass
class DesignSpec:
    name: str = "hybridac"
    scheme: str = "hybridac"
    tiles: int = 148
    mcus_per_tile: int = 8
    adc_bits: int = 6
    base_adc_bits: int = 8
    digital_tiles: int = 0
    extra_crossbars: int = 0          # e.g. zero-filler crossbars of IWS-2
    crossbar_rows: int = 128
    crossbar_cols: int = 128
    weight_bits: int = 8
    bits_per_cell: int = 2
    input_bits: int = 8
    input_bits_per_cycle: int = 1
    read_ns: float = 100.0            # one crossbar read incl. ADC conversion
    digital_macs_per_tile: int = 24
    digital_ghz: float = 1.0
    adc_area_breakdown: dict = field(default_factory=lambda: dict(DEFAULT_ADC_AREA_BREAKDOWN))
    adc_power_breakdown: dict = field(default_factory=lambda: dict(DEFAULT_ADC_POWER_BREAKDOWN))

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}")
        if min(self.tiles, self.mcus_per_tile, self.digital_tiles, self.extra_crossbars) < 0:
            raise ValueError("counts must be >= 0")
        if self.adc_bits > self.base_adc_bits:
            raise ValueError("adc_bits cannot exceed base_adc_bits")

    @property
    def crossbars(self) -> int:
        return self.tiles * self.mcus_per_tile * MCU_PARTS["crossbar"] + self.extra_crossbars


@dataclass
class DesignReport:
    name: str
    area: float
    power: float
    breakdown_area: dict
    breakdown_power: dict
    gops: float
    energy: float = 0.0
    time_ns: float = 0.0
    data_movement_bytes: int = 0

    @property
    def gops_per_mm2(self):
        return self.gops / self.area if self.area else 0.0

    @property
    def gops_per_w(self):
        return self.gops / (self.power / 1000.0) if self.power else 0.0

    def to_dict(self):
        d = asdict(self)
        d["gops_per_mm2"] = self.gops_per_mm2
        d["gops_per_w"] = self.gops_per_w
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def breakdown_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["component", "area_mm2", "power_mw"])
        for k in sorted(self.breakdown_area):
            w.writerow([k, repr(self.breakdown_area[k]), repr(self.breakdown_power[k])])
        return buf.getvalue()


def _adc_cost(design: DesignSpec, table: ComponentCostTable):
    base = ADCSpec(design.base_adc_bits, table["adc"].area, table["adc"].power,
                   design.adc_area_breakdown, design.adc_power_breakdown)
    scaled = adc_scale(base, design.adc_bits)
    return scaled.area, scaled.power


def peak_gops(design: DesignSpec) -> float:
    """Peak throughput at 2 ops per MAC."""
    slices = -(-design.weight_bits // design.bits_per_cell)
    cycles = -(-design.input_bits // design.input_bits_per_cycle)
    useful = design.tiles * design.mcus_per_tile * MCU_PARTS["crossbar"]
    analog = useful * design.crossbar_rows * (design.crossbar_cols / slices) * 2 / (cycles * design.read_ns)
    digital = design.digital_tiles * design.digital_macs_per_tile * 2 * design.digital_ghz
    return analog + digital


def aggregate(design: DesignSpec, table: ComponentCostTable) -> DesignReport:
    """MCU -> tile -> chip sums with a per-component breakdown."""
    area, power = {}, {}

    def add(name, count, a=None, p=None):
        if count == 0:
            return
        entry = table[name]
        a = entry.area if a is None else a
        p = entry.power if p is None else p
        area[name] = area.get(name, 0.0) + count * a
        power[name] = power.get(name, 0.0) + count * p

    n_mcu = design.tiles * design.mcus_per_tile
    if n_mcu:
        adc_a, adc_p = _adc_cost(design, table)
        for name, per in MCU_PARTS.items():
            if name == "adc":
                add(name, per * n_mcu, adc_a, adc_p)
            else:
                add(name, per * n_mcu)
        for name, per in TILE_PARTS.items():
            add(name, per * design.tiles)
    if design.extra_crossbars:
        add("crossbar", design.extra_crossbars)
        adc_a, adc_p = _adc_cost(design, table)
        add("adc", design.extra_crossbars, adc_a, adc_p)
    for name, per in DIGITAL_PARTS.items():
        add(name, per * design.digital_tiles)
    if n_mcu or design.digital_tiles:
        for name, per in CHIP_PARTS.items():
            add(name, per)
    return DesignReport(design.name, sum(area.values()), sum(power.values()), area, power,
                        peak_gops(design) if (n_mcu or design.digital_tiles) else 0.0)


def tile_totals(table: ComponentCostTable, mcus_per_tile=12, adc: ADCSpec | None = None):
    counts = tile_counts(mcus_per_tile)
    area = power = 0.0
    for name, n in counts.items():
        if name == "adc" and adc is not None:
            area += n * adc.area
            power += n * adc.power
        else:
            area += n * table[name].area
            power += n * table[name].power
    return area, power


def adc_tile_savings(table: ComponentCostTable, bits: int, base: ADCSpec | None = None, mcus_per_tile=12):
    """Fractional tile (area, power) saved by scaling the ADC from ``base.bits`` to ``bits``."""
    base = base or default_adc(8, table)
    a0, p0 = tile_totals(table, mcus_per_tile, base)
    a1, p1 = tile_totals(table, mcus_per_tile, adc_scale(base, bits))
    return (a0 - a1) / a0, (p0 - p1) / p0


def adc_share(table: ComponentCostTable, mcus_per_tile=12):
    a, p = tile_totals(table, mcus_per_tile)
    n = tile_counts(mcus_per_tile)["adc"]
    return n * table["adc"].area / a, n * table["adc"].power / p


# --------------------------------------------------------------------------
# load balance


STATED_DIGITAL_FRACTION = 0.16  # operating point used in the reported evaluation
REPORTED_SIDE_EFFICIENCY = (2549, 434)  # analog, digital throughput efficiency used for the split


@dataclass(frozen=True)
class LoadBalance:
    rho: Fraction
    ideal_fraction: Fraction
    stated_fraction: float = STATED_DIGITAL_FRACTION

    @property
    def gap(self) -> float:
        return self.stated_fraction - float(self.ideal_fraction)

    def to_dict(self):
        return {"rho": float(self.rho), "ideal_fraction": float(self.ideal_fraction),
                "stated_fraction": self.stated_fraction, "gap": self.gap}


def load_balance(analog_eff, digital_eff, stated=STATED_DIGITAL_FRACTION) -> LoadBalance:
    """Digital share of the work at which both sides finish together: ``1 / (1 + rho)``."""
    if analog_eff <= 0 or digital_eff <= 0:
        raise ValueError("efficiencies must be > 0")
    rho = Fraction(analog_eff) / Fraction(digital_eff)
    return LoadBalance(rho, 1 / (1 + rho), stated)


# --------------------------------------------------------------------------
# data movement


@dataclass(frozen=True)
class DataMovement:
    scheme: str
    analog_input_bytes: int
    digital_input_bytes: int
    zero_filler_bytes: int
    per_layer: tuple

    @property
    def input_bytes(self) -> int:
        return self.analog_input_bytes + self.digital_input_bytes

    @property
    def total(self) -> int:
        return self.input_bytes + self.zero_filler_bytes

    def to_dict(self):
        d = asdict(self)
        d["input_bytes"] = self.input_bytes
        d["total"] = self.total
        return d


def _layer_input_bytes(net, p, act_bytes):
    return int(np.prod(net.layer_input_shape(p))) * act_bytes


def data_movement(net, partition, scheme="hybridac", act_bytes=1, weight_bytes=1) -> DataMovement:
    """Activation bytes delivered to each domain per inference sample.

    Channel partitions send each input channel to exactly one domain. Weight
    masks (the individual-weight baselines) send the whole input to analog
    and again to digital for every layer with a digital weight; ``iws-2``
    also counts the zeros left behind in the crossbars.
    """
    per_layer = []
    ana = dig = zeros = 0
    is_mask = not hasattr(partition, "digital_counts")
    for p in range(len(net.weights)):
        total = _layer_input_bytes(net, p, act_bytes)
        if is_mask:
            m = np.asarray(partition.masks[p], dtype=bool)
            a, d = total, (total if m.any() else 0)
            z = int(m.sum()) * weight_bytes if scheme == "iws-2" else 0
        else:
            mask = np.asarray(partition.masks[p], dtype=bool)
            per_channel = total // len(mask)
            d = int(mask.sum()) * per_channel
            a, z = total - d, 0
        per_layer.append({"layer": p, "analog": a, "digital": d, "zero_filler": z})
        ana, dig, zeros = ana + a, dig + d, zeros + z
    return DataMovement(scheme, ana, dig, zeros, tuple(per_layer))


def zero_filler_crossbars(net, mask, rows=128, cols=128, weight_bits=8, bits_per_cell=2) -> int:
    """Crossbars occupied only because masked weights stay behind as zeros."""
    slices = -(-weight_bits // bits_per_cell)
    extra = 0
    for p, m in enumerate(mask.masks):
        m = np.asarray(m, dtype=bool)
        k = m.shape[-1]
        m_rows = m.reshape(-1, k).shape[0]
        full = -(-m_rows // rows) * -(-(k * slices) // cols)
        kept_rows = int((~m.reshape(-1, k)).any(axis=1).sum())
        kept = -(-kept_rows // rows) * -(-(k * slices) // cols) if kept_rows else 0
        extra += full - kept
    return extra


# --------------------------------------------------------------------------
# timeline


@dataclass(frozen=True)
class Stage:
    analog_ns: float
    digital_ns: float = 0.0
    rewrite_cells: int = 0


@dataclass
class Timeline:
    stage_ns: list[float]
    latency_ns: float
    makespan_ns: float
    energy_pj: float
    inferences: int

    def to_dict(self):
        return asdict(self)


def timeline(stages, *, inferences=1, analog_mw=0.0, digital_mw=0.0, write_ns=200.0,
             cells_per_write=128, rewrite_multiplier=1, write_pj=0.0) -> Timeline:
    """Per-layer stage times with an analog/digital barrier, pipelined over inferences.

    A stage lasts ``max(analog, digital)`` plus any crossbar rewrite time
    (``rewrite_cells / cells_per_write`` serial writes of ``write_ns`` each,
    times ``rewrite_multiplier`` verify rounds). Latency is the stage sum;
    ``inferences`` back-to-back inputs finish after latency plus
    ``(inferences - 1)`` times the slowest stage.
    """
    if inferences < 1:
        raise ValueError("inferences must be >= 1")
    times, energy = [], 0.0
    for st in stages:
        writes = -(-st.rewrite_cells // cells_per_write) * rewrite_multiplier
        times.append(max(st.analog_ns, st.digital_ns) + writes * write_ns)
        # mW * ns = pJ
        energy += analog_mw * st.analog_ns + digital_mw * st.digital_ns
        energy += st.rewrite_cells * rewrite_multiplier * write_pj
    latency = float(sum(times))
    makespan = latency + (inferences - 1) * (max(times) if times else 0.0)
    return Timeline(times, latency, makespan, energy * inferences, inferences)


# --------------------------------------------------------------------------
# efficiency table


# normalized peak efficiencies (area, power) reported for designs not modeled here
REPORTED_EFFICIENCY = {
    "puma": (0.70, 0.79),
    "sre": (0.19, 0.26),
    "forms8": (0.54, 0.61),
    "forms16": (0.77, 0.84),
    "dadiannao": (0.13, 0.45),
    "tpu": (0.08, 0.48),
    "wax": (0.33, 2.3),
    "iws-1": (0.13, 0.15),
    "iws-2": (0.38, 0.41),
    "hybridac": (1.43, 1.81),
    "hybridacdi": (1.75, 2.5),
}
REPORTED_IDEAL_ISAAC = (1912.0, 2510.0)  # GOPS/s/mm^2, GOPS/s/W


def efficiency_table(reports: list[DesignReport], reference: str = "ideal-isaac", include_reported=True) -> list[dict]:
    """Rows of area/power efficiency normalized to ``reference``; echoed constants tagged ``reported``."""
    ref = next((r for r in reports if r.name == reference), None)
    if ref is None:
        raise KeyError(f"reference design {reference!r} not among reports")
    rows = [{"design": r.name, "gops_per_mm2": r.gops_per_mm2 / ref.gops_per_mm2,
             "gops_per_w": r.gops_per_w / ref.gops_per_w, "source": "modeled"} for r in reports]
    if include_reported:
        rows += [{"design": k, "gops_per_mm2": a, "gops_per_w": p, "source": "reported"}
                 for k, (a, p) in REPORTED_EFFICIENCY.items()]
    return rows


def table_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    if not rows:
        return ""
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return buf.getvalue()


def preset_designs(digital_tiles=16) -> list[DesignSpec]:
    """Desk-scale stand-ins for the compared configurations."""
    return [
        DesignSpec("ideal-isaac", "ideal-isaac", tiles=168, mcus_per_tile=12, adc_bits=8),
        DesignSpec("hybridac", "hybridac", tiles=148, mcus_per_tile=8, adc_bits=6, digital_tiles=digital_tiles,
                   weight_bits=6),
        DesignSpec("hybridacdi", "hybridacdi", tiles=148, mcus_per_tile=8, adc_bits=4, digital_tiles=digital_tiles,
                   weight_bits=6),
        DesignSpec("iws-2", "iws-2", tiles=168, mcus_per_tile=12, adc_bits=8, digital_tiles=digital_tiles,
                   extra_crossbars=400),
        DesignSpec("sre-like", "sre-like", tiles=168, mcus_per_tile=12, adc_bits=5),
    ]
