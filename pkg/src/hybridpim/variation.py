"""Conductance-variation noise and trial-averaged noisy inference.

Noise is value-proportional Gaussian: ``w + e`` with ``e ~ N(0, (sigma*|w|)**2)``
per weight. Trial ``k`` of a run draws from a Philox generator seeded by
``SeedSequence(seed, spawn_key=stream + (k,))``, so trials are reproducible,
independent, and can be split across runs without changing results.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .nn import Network, accuracy

RNG_ALGORITHM = "numpy.random.Philox (SeedSequence spawn keys)"


@dataclass(frozen=True)
class NoiseModel:
    sigma_analog: float = 0.50
    sigma_digital: float = 0.10
    seed: int = 0

    def __post_init__(self):
        if self.sigma_analog < 0 or self.sigma_digital < 0:
            raise ValueError("noise sigma must be >= 0")


def trial_rng(seed: int, key=()) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def perturb_weights(w, sigma, rng) -> np.ndarray:
    """Return ``w`` plus value-proportional Gaussian noise; ``w`` is untouched."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    w = np.asarray(w)
    z = rng.standard_normal(w.shape)
    if sigma == 0:
        return w.copy()
    return (w + z * (sigma * np.abs(w))).astype(w.dtype, copy=False)


def channel_sigma(net: Network, assignment, noise: NoiseModel) -> list[np.ndarray]:
    """Per-weight sigma arrays: digital channels get ``sigma_digital``."""
    out = []
    for p, w in enumerate(net.weights):
        sig = np.full(w.shape, noise.sigma_analog)
        if assignment is not None:
            mask = assignment.weight_mask(net, p)
            sig[mask] = noise.sigma_digital
        out.append(sig)
    return out


def noisy_weights(net: Network, assignment, noise: NoiseModel, rng) -> list[np.ndarray]:
    sigmas = channel_sigma(net, assignment, noise)
    out = []
    for w, sig in zip(net.weights, sigmas):
        z = rng.standard_normal(w.shape)
        out.append((w + z * sig * np.abs(w)).astype(np.float32))
    return out


@dataclass
class TrialReport:
    accuracies: list[float]
    seeds: list[str] = field(default_factory=list)

    @property
    def trials(self) -> int:
        return len(self.accuracies)

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def std(self) -> float:
        return float(np.std(self.accuracies, ddof=1)) if len(self.accuracies) > 1 else 0.0

    @property
    def sem(self) -> float:
        return self.std / np.sqrt(self.trials)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["trial", "seed", "accuracy"])
        for i, (seed, acc) in enumerate(zip(self.seeds, self.accuracies)):
            writer.writerow([i, seed, repr(float(acc))])
        return buf.getvalue()

    def summary(self) -> dict:
        return {"trials": self.trials, "mean": self.mean, "std": self.std, "rng": RNG_ALGORITHM}

    def to_json(self) -> str:
        return json.dumps(self.summary(), sort_keys=True, indent=2)


def noisy_accuracy(net: Network, assignment, data, noise: NoiseModel, trials=50, *, stream=(), start=0,
                   evaluate=None) -> TrialReport:
    """Accuracy under fresh noise draws, one per trial.

    ``evaluate(weights) -> accuracy`` replaces the float forward pass when
    given (the quantized pipeline plugs in here).
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    evaluate = evaluate or (lambda ws: accuracy(net, data, ws))
    accs, seeds = [], []
    for k in range(start, start + trials):
        key = tuple(stream) + (k,)
        rng = trial_rng(noise.seed, key)
        accs.append(evaluate(noisy_weights(net, assignment, noise, rng)))
        seeds.append(f"{noise.seed}:{'/'.join(map(str, key))}")
    return TrialReport(accs, seeds)


# --------------------------------------------------------------------------
# wordline-activation sweep

DEFAULT_SCENARIOS = (
    # name, R-ratio multiple (divides the cell sigma), protected
    ("Rb", 1.0, False),
    ("2Rb", 2.0, False),
    ("3Rb", 3.0, False),
    ("hybridac", 1.0, True),
)


@dataclass
class SweepPoint:
    scenario: str
    r: int
    trial: int
    value: float


def sweep_csv(points) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["scenario", "r", "trial", "value"])
    for pt in points:
        writer.writerow([pt.scenario, pt.r, pt.trial, repr(float(pt.value))])
    return buf.getvalue()


def sweep_means(points) -> dict:
    """``{(scenario, r): mean value}``."""
    acc = {}
    for pt in points:
        acc.setdefault((pt.scenario, pt.r), []).append(pt.value)
    return {k: float(np.mean(v)) for k, v in acc.items()}


def wordline_sweep(net: Network, data, crossbar, r_list=(16, 32, 64, 128), *, assignment=None,
                   calibration=None, noise: NoiseModel | None = None, scenarios=DEFAULT_SCENARIOS,
                   trials=5, n1=6, n2=8, act_bits=8, seed=0, metric="accuracy") -> list[SweepPoint]:
    """Accuracy of the quantized network on crossbars activating ``r`` rows per read.

    With ``metric="matvec_error"`` each point is instead the relative RMS
    error of the crossbar products against the exact integer products,
    pooled over every analog matmul of the forward pass.

    Unprotected scenarios run every channel on crossbars whose cell sigma is
    ``crossbar.sigma`` divided by the scenario's R-ratio multiple. Protected
    scenarios move ``assignment``'s channels to the digital side (weight
    noise ``noise.sigma_digital``). The ADC resolution is held at
    ``crossbar.adc_bits`` for every ``r``.
    """
    from .quantization import calibrate_scheme, hybrid_forward, quantized_accuracy
    from .analog import crossbar_matmul
    from .selection import ChannelAssignment

    if metric not in ("accuracy", "matvec_error"):
        raise ValueError("metric must be 'accuracy' or 'matvec_error'")

    for r in r_list:
        if r > crossbar.rows:
            raise ValueError(f"r={r} exceeds crossbar rows {crossbar.rows}")
    if any(p for _, _, p in scenarios) and assignment is None:
        raise ValueError("protected scenarios need an assignment")
    noise = noise or NoiseModel(sigma_analog=crossbar.sigma, sigma_digital=0.0, seed=seed)
    calibration = data if calibration is None else calibration
    inputs = getattr(data, "inputs", data)
    labels = getattr(data, "labels", None)
    unprotected = ChannelAssignment.all_analog(net)
    schemes = {
        False: calibrate_scheme(net, unprotected, calibration, n1, n2, act_bits),
        True: calibrate_scheme(net, assignment, calibration, n1, n2, act_bits) if assignment is not None else None,
    }
    digital_noise = NoiseModel(sigma_analog=0.0, sigma_digital=noise.sigma_digital, seed=noise.seed)
    points = []
    for si, (name, ratio, protected) in enumerate(scenarios):
        part = assignment if protected else unprotected
        for r in r_list:
            cfg = crossbar.with_(active_rows=r, r_ratio_scale=ratio, weight_bits=n1, input_bits=act_bits)
            for k in range(trials):
                rng = trial_rng(noise.seed, (si, r, k))
                mm = crossbar_matmul(cfg, rng)
                sq = [0.0, 0.0]
                if metric == "matvec_error":
                    mm = _error_probe(mm, sq)
                logits = hybrid_forward(net, part, schemes[protected], inputs, noise=digital_noise, rng=rng,
                                        analog_matmul=mm)
                value = quantized_accuracy(logits, labels) if metric == "accuracy" else float(np.sqrt(sq[0] / sq[1]))
                points.append(SweepPoint(name, r, k, value))
    return points


def _error_probe(mm, sq):
    """Wrap a crossbar matmul to accumulate squared error and squared exact output into ``sq``."""

    def probe(cols, w_signed):
        got = mm(cols, w_signed)
        exact = np.asarray(cols, dtype=np.int64) @ np.asarray(w_signed, dtype=np.int64)
        sq[0] += float(np.sum((got - exact) ** 2))
        sq[1] += float(np.sum(exact.astype(np.float64) ** 2))
        return got

    return probe


def bitline_std(r_list=(16, 32, 64, 128), sigma=0.1, cell=1.0, samples=20000, seed=0) -> dict:
    """Std of an ``r``-row bitline sum of equal cells with i.i.d. proportional noise."""
    out = {}
    for r in r_list:
        rng = trial_rng(seed, (r,))
        g = cell * (1.0 + sigma * rng.standard_normal((samples, r)))
        out[r] = float(g.sum(axis=1).std(ddof=1))
    return out


def fit_exponent(xs, ys) -> float:
    """Least-squares slope of log(y) against log(x)."""
    return float(np.polyfit(np.log(np.asarray(xs, float)), np.log(np.asarray(ys, float)), 1)[0])
