"""Input-channel-wise protection loop and the per-weight (IWS) baseline."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import container
from .nn import Network, accuracy
from .variation import NoiseModel, TrialReport, noisy_accuracy

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ChannelAssignment:
    """One boolean per input channel and layer; True means digital (protected)."""

    masks: tuple

    def __post_init__(self):
        object.__setattr__(self, "masks", tuple(np.asarray(m, dtype=bool) for m in self.masks))

    @classmethod
    def all_analog(cls, net: Network) -> "ChannelAssignment":
        return cls(tuple(np.zeros(c, dtype=bool) for c in net.channel_counts()))

    @classmethod
    def all_digital(cls, net: Network) -> "ChannelAssignment":
        return cls(tuple(np.ones(c, dtype=bool) for c in net.channel_counts()))

    def with_channels(self, items) -> "ChannelAssignment":
        masks = [m.copy() for m in self.masks]
        for layer, ch in items:
            masks[layer][ch] = True
        return ChannelAssignment(tuple(masks))

    @property
    def digital_counts(self):
        return [int(m.sum()) for m in self.masks]

    @property
    def analog_counts(self):
        return [int((~m).sum()) for m in self.masks]

    def validate(self, net: Network):
        counts = net.channel_counts()
        if len(self.masks) != len(counts) or any(len(m) != c for m, c in zip(self.masks, counts)):
            raise ValueError(
                f"assignment masks {[len(m) for m in self.masks]} do not match channel counts {counts}"
            )

    def weight_mask(self, net: Network, p: int) -> np.ndarray:
        """Boolean mask congruent with layer ``p``'s weights."""
        w = net.weights[p]
        m = self.masks[p]
        if w.ndim == 4:
            return np.broadcast_to(m[None, None, :, None], w.shape)
        return np.broadcast_to(m[:, None], w.shape)

    def to_weight_mask(self, net: Network) -> "WeightMask":
        return WeightMask(tuple(np.array(self.weight_mask(net, p)) for p in range(len(self.masks))))

    def to_bitset(self) -> np.ndarray:
        return np.packbits(np.concatenate(self.masks).astype(np.uint8), bitorder="little")

    @classmethod
    def from_bitset(cls, bits, counts) -> "ChannelAssignment":
        flat = np.unpackbits(np.asarray(bits, dtype=np.uint8), bitorder="little")[: sum(counts)].astype(bool)
        return cls(tuple(np.split(flat, np.cumsum(counts)[:-1])))


@dataclass(frozen=True)
class WeightMask:
    """Per-weight protection mask used by the individual-weight baseline."""

    masks: tuple

    def __post_init__(self):
        object.__setattr__(self, "masks", tuple(np.asarray(m, dtype=bool) for m in self.masks))

    @property
    def replicated_input(self):
        """A layer's whole input must also reach the digital side once any weight is digital."""
        return [bool(m.any()) for m in self.masks]

    @property
    def zeros_left(self) -> int:
        return int(sum(m.sum() for m in self.masks))

    def weight_mask(self, net, p):
        return self.masks[p]


@dataclass
class SelectionConfig:
    acc_desired: float = 0.9
    target: str = "absolute"  # or "drop": acc_desired is the tolerated drop from clean accuracy
    trials: int = 5
    validation_trials: int = 50
    noise: NoiseModel = field(default_factory=NoiseModel)
    max_fraction: float = 0.5
    fixed_noise: bool = False
    protect_first_last: bool = False
    step: int = 1

    def __post_init__(self):
        if not 0 < self.acc_desired <= 1:
            raise ValueError("acc_desired must lie in (0, 1]")
        if self.trials < 1 or self.validation_trials < 0 or self.step < 1:
            raise ValueError("trials and step must be >= 1")
        if self.target not in ("absolute", "drop"):
            raise ValueError("target must be 'absolute' or 'drop'")
        if isinstance(self.noise, dict):
            self.noise = NoiseModel(**self.noise)


@dataclass
class TraceEntry:
    iteration: int
    layer: int | None
    channel: int | None
    sensitivity: float
    accuracy: float
    accuracy_std: float
    protected_fraction: float


@dataclass
class SelectionResult:
    assignment: object
    accuracy: TrialReport
    target: float
    protected_fraction: float
    iterations: int
    cap_reached: bool
    trace: list[TraceEntry]
    validation: TrialReport | None = None

    @property
    def success(self):
        return self.accuracy.mean >= self.target

    def summary(self) -> dict:
        out = {
            "target": self.target,
            "acc_calculated": self.accuracy.mean,
            "acc_calculated_std": self.accuracy.std,
            "protected_fraction": self.protected_fraction,
            "iterations": self.iterations,
            "cap_reached": self.cap_reached,
            "success": self.success,
            "trace": [asdict(t) for t in self.trace],
        }
        if self.validation is not None:
            out["validation"] = self.validation.summary()
        return out

    def to_json(self) -> str:
        return json.dumps(self.summary(), sort_keys=True, indent=2)


def protected_fraction(assignment, net: Network) -> float:
    """Weights on the digital side divided by all weights."""
    if isinstance(assignment, WeightMask):
        return float(sum(m.sum() for m in assignment.masks) / net.num_params)
    per = net.weights_per_channel()
    num = sum(int(m.sum()) * k for m, k in zip(assignment.masks, per))
    den = sum(len(m) * k for m, k in zip(assignment.masks, per))
    return num / den


def selection_distribution(assignment, layers=None):
    """Per-layer protected percentage and its population standard deviation."""
    pct = np.array([100.0 * np.mean(m) for m in assignment.masks])
    if layers is not None:
        pct = pct[list(layers)]
    return pct, float(pct.std())


def sorted_channels(sens):
    """Global (layer, channel) list, most sensitive first; ties by layer then channel."""
    items = [(float(s), p, c) for p, arr in enumerate(sens.per_channel) for c, s in enumerate(arr)]
    items.sort(key=lambda t: (-t[0], t[1], t[2]))
    return items


def sorted_weights(sens):
    items = []
    for p, arr in enumerate(sens.per_param):
        flat = arr.ravel()
        order = np.lexsort((np.arange(flat.size), -flat))
        items.extend((float(flat[i]), p, int(i)) for i in order)
    items.sort(key=lambda t: (-t[0], t[1], t[2]))
    return items


def _target(cfg: SelectionConfig, net, data) -> float:
    if cfg.target == "drop":
        return accuracy(net, data) - cfg.acc_desired
    return cfg.acc_desired


def _protection_loop(net, data, cfg, items, start, add, evaluate=None):
    target = _target(cfg, net, data)

    def measure(state, it):
        stream = (0,) if cfg.fixed_noise else (it,)
        return noisy_accuracy(net, state, data, cfg.noise, cfg.trials, stream=stream, evaluate=evaluate)

    state = start
    frac = protected_fraction(state, net)
    report = measure(state, 0)
    trace = [TraceEntry(0, None, None, 0.0, report.mean, report.std, frac)]
    it, pos, cap = 0, 0, False
    while report.mean < target:
        if pos >= len(items) or frac >= cfg.max_fraction:
            cap = True
            break
        batch = items[pos:pos + cfg.step]
        pos += len(batch)
        state = add(state, batch)
        frac = protected_fraction(state, net)
        it += 1
        report = measure(state, it)
        s, p, c = batch[-1]
        trace.append(TraceEntry(it, p, c, s, report.mean, report.std, frac))
        log.debug("iter %d: +(%d,%d) acc=%.4f frac=%.4f", it, p, c, report.mean, frac)
    validation = None
    if cfg.validation_trials:
        validation = noisy_accuracy(net, state, data, cfg.noise, cfg.validation_trials,
                                    stream=(1 << 20,), evaluate=evaluate)
    return SelectionResult(state, report, target, frac, it, cap, trace, validation)


def select_channels(net: Network, sens, data, cfg: SelectionConfig, evaluate=None) -> SelectionResult:
    """Move the most sensitive input channels to the digital side until the
    noisy accuracy reaches the target or the protected-weight cap is hit."""
    if sens.per_channel is None:
        raise ValueError("sensitivity map has no per-channel values")
    start = ChannelAssignment.all_analog(net)
    if cfg.protect_first_last:
        last = len(start.masks) - 1
        start = ChannelAssignment(tuple(
            np.ones_like(m) if p in (0, last) else m for p, m in enumerate(start.masks)
        ))
    items = [t for t in sorted_channels(sens) if not start.masks[t[1]][t[2]]]

    def add(state, batch):
        return state.with_channels((p, c) for _, p, c in batch)

    return _protection_loop(net, data, cfg, items, start, add, evaluate)


def iws_select(net: Network, sens, data, cfg: SelectionConfig, evaluate=None) -> SelectionResult:
    """Individual-weight baseline: same loop, popping single weights."""
    start = WeightMask(tuple(np.zeros(w.shape, dtype=bool) for w in net.weights))
    items = sorted_weights(sens)

    def add(state, batch):
        masks = [m.copy() for m in state.masks]
        for _, p, i in batch:
            masks[p].ravel()[i] = True
        return WeightMask(tuple(masks))

    return _protection_loop(net, data, cfg, items, start, add, evaluate)


def save_assignment(assignment: ChannelAssignment, path, meta=None):
    meta = {"counts": [len(m) for m in assignment.masks], **(meta or {})}
    container.write(path, "assignment", meta, {"bits": assignment.to_bitset()})


def load_assignment(path) -> ChannelAssignment:
    meta, arrays = container.read(path, "assignment")
    return ChannelAssignment.from_bitset(arrays["bits"], meta["counts"])
