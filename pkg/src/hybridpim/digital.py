"""Analytical cycle and SRAM-traffic model of the small digital tile.

Each tile owns a 1 KB SRAM of 32 rows x 24 elements: 1 activation row,
24 weight rows and 7 partial-sum rows. An activation row carries 6
consecutive inputs of 4 input channels; a weight row carries 3 kernel taps
x 4 input channels x 2 output kernels. One weight row against one
activation row fills the 24 partial-sum registers in ``fill_cycles`` cycles
(12 by default). Weights are loaded once and stay resident until every
output that needs them has been produced.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field


@dataclass(frozen=True)
class DigitalTileConfig:
    sram_width: int = 24
    activation_rows: int = 1
    weight_rows: int = 24
    psum_rows: int = 7
    sram_bytes: int = 1024
    multipliers: int = 24
    tiles: int = 1
    register_partitions: int = 4
    fill_cycles: int = 12
    inputs_per_row: int = 6
    taps_per_row: int = 3
    kernels_per_row: int = 2
    overlap: bool = True
    hop_cycles: int = 1

    def __post_init__(self):
        if self.activation_rows + self.weight_rows + self.psum_rows != 32:
            raise ValueError("row budget must be 1 activation + 24 weight + 7 partial-sum rows (32)")
        if self.register_partitions != 4:
            raise ValueError("registers are split four ways, one part per input channel of a row")
        if self.inputs_per_row * self.register_partitions != self.sram_width:
            raise ValueError("an activation row must hold inputs_per_row x 4 channels")
        if self.taps_per_row * self.register_partitions * self.kernels_per_row != self.sram_width:
            raise ValueError("a weight row must hold taps x 4 channels x kernels")
        if self.fill_cycles < 1 or self.tiles < 1:
            raise ValueError("fill_cycles and tiles must be >= 1")

    @property
    def channels_per_row(self) -> int:
        return self.register_partitions


@dataclass
class CycleReport:
    cycles: int
    load: int
    compute: int
    writeback: int
    weight_rows: int
    activation_rows: int
    psum_rows: int
    weight_reads: int       # weight elements read from SRAM
    macs: int
    utilization: float
    overlap: bool
    layer: str = ""

    @property
    def accesses(self) -> dict:
        return {"activation": self.activation_rows, "weight": self.weight_rows, "psum": self.psum_rows}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["breakdown"] = {"load": self.load, "compute": self.compute, "writeback": self.writeback}
        d["accesses"] = self.accesses
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def _cdiv(a, b):
    return -(-a // b)


def schedule_blocks(weight_rows: int, activation_rows: int, cfg: DigitalTileConfig = DigitalTileConfig()) -> int:
    """Compute cycles for every weight row meeting every activation row once."""
    return weight_rows * activation_rows * cfg.fill_cycles


def _total(load, compute, writeback, overlap):
    return max(load, compute, writeback) if overlap else load + compute + writeback


def schedule_layer(channels: int, kernels: int, r: int, out_hw, in_hw=None, stride: int = 1,
                   cfg: DigitalTileConfig = DigitalTileConfig(), layer: str = "") -> CycleReport:
    """Cycles for ``channels`` digital input channels of an R x R conv with ``kernels`` outputs.

    Dense layers are 1 x 1 convs over a 1 x 1 map. Work is spread evenly over
    ``cfg.tiles`` tiles; only channel counts matter, never channel identities.
    """
    if channels < 0 or kernels < 1 or r < 1 or stride < 1:
        raise ValueError("bad layer geometry")
    ho, wo = out_hw
    hi, wi = in_hw if in_hw is not None else ((ho - 1) * stride + r, (wo - 1) * stride + r)
    if channels == 0:
        return CycleReport(0, 0, 0, 0, 0, 0, 0, 0, 0, 0.0, cfg.overlap, layer)

    groups = _cdiv(channels, cfg.channels_per_row)
    weight_rows = groups * _cdiv(kernels, cfg.kernels_per_row) * r * _cdiv(r, cfg.taps_per_row)
    outs_per_segment = max(1, (cfg.inputs_per_row - cfg.taps_per_row) // stride + 1)
    segments = ho * _cdiv(wo, outs_per_segment)
    compute = _cdiv(schedule_blocks(weight_rows, segments, cfg), cfg.tiles)

    activation_rows = groups * hi * _cdiv(wi, cfg.inputs_per_row)
    psum_rows = _cdiv(kernels * ho * wo, cfg.sram_width)
    load = _cdiv(weight_rows + activation_rows, cfg.tiles) + (cfg.hop_cycles if cfg.tiles > 1 else 0)
    writeback = _cdiv(psum_rows, cfg.tiles)

    macs = channels * kernels * r * r * ho * wo
    utilization = macs / (compute * cfg.tiles * cfg.multipliers)
    return CycleReport(
        _total(load, compute, writeback, cfg.overlap), load, compute, writeback,
        weight_rows, activation_rows, psum_rows, channels * kernels * r * r, macs,
        utilization, cfg.overlap, layer,
    )


def schedule_network(net, assignment, cfg: DigitalTileConfig = DigitalTileConfig()) -> list[CycleReport]:
    """One report per parameterized layer for the digital partition of ``assignment``."""
    reports = []
    for p, count in enumerate(assignment.digital_counts):
        layer = net.param_layer(p)
        out = net.layer_output_shape(p)
        inp = net.layer_input_shape(p)
        if layer.kind == "conv2d":
            reports.append(schedule_layer(count, layer.out_channels, layer.kernel_size, out[:2], inp[:2],
                                          layer.stride, cfg, f"layer{p}"))
        else:
            reports.append(schedule_layer(count, layer.out_features, 1, (1, 1), (1, 1), 1, cfg, f"layer{p}"))
    return reports


DEFAULT_ACCESS_ENERGY = {"1KB": 1.0, "6KB": 2.1, "54KB": 5.2}  # relative pJ per access, 54KB = 5.2x 1KB


def sram_traffic(report: CycleReport, energy_per_access: dict = None, buffer: str = "1KB") -> float:
    """Energy of every SRAM row access in ``report`` at ``buffer``'s per-access cost."""
    table = DEFAULT_ACCESS_ENERGY if energy_per_access is None else energy_per_access
    if buffer not in table:
        raise KeyError(f"no per-access energy for buffer {buffer!r}; table has {sorted(table)}")
    accesses = report.activation_rows + report.weight_rows + 2 * report.psum_rows
    return accesses * float(table[buffer])


def timeline_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", "start", "cycles", "load", "compute", "writeback", "utilization"])
    t = 0
    for rep in reports:
        w.writerow([rep.layer, t, rep.cycles, rep.load, rep.compute, rep.writeback, repr(rep.utilization)])
        t += rep.cycles
    return buf.getvalue()


def config_dict(cfg: DigitalTileConfig) -> dict:
    return asdict(cfg)
