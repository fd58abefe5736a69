"""Pipeline stages behind the command line.

Every stage reads its inputs from and writes its artifacts into one run
directory, then refreshes ``manifest.json`` there. Stages are pure functions
of (config, upstream artifacts), so a rerun with the same config reproduces
every CSV/JSON byte for byte.
"""

from __future__ import annotations

import csv
import datetime as _dt
import hashlib
import io
import itertools
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, analog, container, cost, digital, quantization, selection, sensitivity, train, variation
from .config import ExperimentConfig, dump_yaml
from .data import SPLITS
from .nn import accuracy

log = logging.getLogger(__name__)

STAGES = ("train", "sensitivity", "select", "quantize", "simulate", "cost", "sweep", "report")
WORKERS_ENV = "HYBRIDPIM_WORKERS"

# artifact -> the command that produces it
PRODUCERS = {
    "model.hpim": "train",
    "data_train.hpim": "train",
    "data_calibration.hpim": "train",
    "data_evaluation.hpim": "train",
    "sensitivity.hpim": "sensitivity",
    "assignment.hpim": "select",
    "quantized.hpim": "quantize",
}


class MissingArtifact(FileNotFoundError):
    def __init__(self, path: Path, command: str):
        super().__init__(f"{path} not found; run `hybridpim {command} --out {path.parent}` first "
                         f"(or `hybridpim run` for the whole pipeline)")
        self.command = command


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


class RunDir:
    def __init__(self, root, cfg: ExperimentConfig):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.cfg = cfg

    def path(self, name) -> Path:
        return self.root / name

    def need(self, name) -> Path:
        p = self.path(name)
        if not p.exists():
            raise MissingArtifact(p, PRODUCERS.get(name, "run"))
        return p

    def write_text(self, name, text):
        self.path(name).write_text(text)
        return name

    def write_json(self, name, obj):
        return self.write_text(name, _dumps(obj))

    # loaders
    def model(self):
        return container.load_model(self.need("model.hpim"))

    def split(self, name):
        ds = container.load_dataset(self.need(f"data_{name}.hpim"))
        if name == "evaluation" and self.cfg.eval_samples:
            ds = ds.subset(slice(0, self.cfg.eval_samples))
        return ds

    def assignment(self):
        return selection.load_assignment(self.need("assignment.hpim"))

    def sensitivity(self):
        return sensitivity.load(self.need("sensitivity.hpim"))


# --------------------------------------------------------------------------
# manifest


def _timestamp() -> str:
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    t = _dt.datetime.fromtimestamp(int(epoch), _dt.timezone.utc) if epoch else _dt.datetime.now(_dt.timezone.utc)
    return t.strftime("%Y-%m-%dT%H:%M:%SZ")


def seed_ledger(cfg: ExperimentConfig) -> dict:
    return {
        "dataset": cfg.seed,
        "init_and_shuffle": cfg.seed,
        "eigensolver_start": cfg.seed,
        "noise_trials": cfg.seed,
        "sweep": cfg.seed,
        "rng": variation.RNG_ALGORITHM,
    }


def write_manifest(run: RunDir, stage: str):
    files = {}
    for p in sorted(run.root.rglob("*")):
        if p.is_file() and p.name != "manifest.json":
            data = p.read_bytes()
            files[p.relative_to(run.root).as_posix()] = {"sha256": hashlib.sha256(data).hexdigest(), "bytes": len(data)}
    old = {}
    mp = run.path("manifest.json")
    if mp.exists():
        try:
            old = json.loads(mp.read_text())
        except json.JSONDecodeError:
            old = {}
    stages = sorted(set(old.get("stages", [])) | {stage}, key=lambda s: (STAGES + ("run",)).index(s))
    manifest = {
        "tool": "hybridpim",
        "version": __version__,
        "config_sha256": run.cfg.digest(),
        "created": _timestamp(),
        "seeds": seed_ledger(run.cfg),
        "stages": stages,
        "files": files,
    }
    run.write_json("manifest.json", manifest)
    return manifest


# --------------------------------------------------------------------------
# stages


def stage_train(run: RunDir) -> list[str]:
    cfg = run.cfg
    if cfg.dataset:
        src = Path(cfg.dataset)
        splits = {}
        for name in SPLITS:
            f = src / f"data_{name}.hpim"
            if not f.exists():
                raise FileNotFoundError(f"dataset directory {src} lacks {f.name}")
            splits[name] = container.load_dataset(f)
    else:
        splits = train.make_dataset(cfg.preset, cfg.seed)
    if cfg.model:
        net = container.load_model(cfg.model)
    else:
        t = cfg.train
        net = train.train_toy(train.TrainConfig(cfg.preset, t.epochs, t.lr, t.momentum, t.batch_size, cfg.seed,
                                                cfg.seed, t.min_accuracy, t.weight_decay), splits)
    out = []
    for name in SPLITS:
        container.save_dataset(splits[name], run.path(f"data_{name}.hpim"))
        out.append(f"data_{name}.hpim")
    container.save_model(net, run.path("model.hpim"))
    out.append("model.hpim")
    ev = run.split("evaluation")
    out.append(run.write_json("train.json", {
        "preset": cfg.preset,
        "source": cfg.model or "trained",
        "params": net.num_params,
        "channels": [int(c) for c in net.channel_counts()],
        "accuracy": {"train": accuracy(net, splits["train"]), "evaluation": accuracy(net, ev)},
    }))
    return out


def stage_sensitivity(run: RunDir) -> list[str]:
    cfg, sc = run.cfg, run.cfg.sensitivity
    net = run.model()
    data = run.split("train").subset(slice(0, sc.samples))
    smap = sensitivity.compute(net, data, sc.n_pairs, sc.aggregation, method=sc.method, max_iter=sc.max_iter,
                               tol=sc.tol, eps=sc.eps, seed=cfg.seed)
    sensitivity.save(smap, run.path("sensitivity.hpim"))
    summary = {
        "n_pairs": smap.n_pairs,
        "aggregation": smap.aggregation,
        "residuals": smap.meta.get("residuals"),
        "layer_totals": [float(t) for t in smap.layer_totals()],
        "per_channel": [[float(v) for v in a] for a in smap.per_channel],
    }
    return ["sensitivity.hpim", run.write_json("sensitivity.json", summary)]


def selection_config(cfg: ExperimentConfig) -> selection.SelectionConfig:
    s = cfg.selection
    return selection.SelectionConfig(
        acc_desired=s.acc_desired, target=s.target, trials=s.trials, validation_trials=s.validation_trials,
        noise=variation.NoiseModel(cfg.noise.sigma_analog, cfg.noise.sigma_digital, cfg.seed),
        max_fraction=s.max_fraction, fixed_noise=s.fixed_noise, protect_first_last=s.protect_first_last,
        step=s.step,
    )


def trace_csv(trace) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iteration", "layer", "channel", "sensitivity", "accuracy", "accuracy_std", "protected_fraction"])
    for t in trace:
        w.writerow([t.iteration, "" if t.layer is None else t.layer, "" if t.channel is None else t.channel,
                    repr(t.sensitivity), repr(t.accuracy), repr(t.accuracy_std), repr(t.protected_fraction)])
    return buf.getvalue()


def stage_select(run: RunDir) -> list[str]:
    net, sens, ev = run.model(), run.sensitivity(), run.split("evaluation")
    res = selection.select_channels(net, sens, ev, selection_config(run.cfg))
    selection.save_assignment(res.assignment, run.path("assignment.hpim"),
                              {"protected_fraction": res.protected_fraction})
    summary = res.summary()
    summary.pop("trace")
    summary["clean_accuracy"] = accuracy(net, ev)
    summary["digital_channels"] = [int(c) for c in res.assignment.digital_counts]
    pct, spread = selection.selection_distribution(res.assignment)
    summary["per_layer_protected_pct"] = [float(v) for v in pct]
    summary["per_layer_protected_std"] = spread
    return ["assignment.hpim", run.write_json("selection.json", summary),
            run.write_text("selection_trace.csv", trace_csv(res.trace))]


def stage_quantize(run: RunDir) -> list[str]:
    q = run.cfg.quant
    net, assignment = run.model(), run.assignment()
    calib, ev = run.split("calibration"), run.split("evaluation")
    scheme = quantization.calibrate_scheme(net, assignment, calib, q.n1, q.n2, q.act_bits)
    quantization.save_quantized(run.path("quantized.hpim"), net, scheme, assignment)
    logits = quantization.hybrid_forward(net, assignment, scheme, ev, q.accum)
    summary = {
        "scheme": scheme.to_dict(),
        "accum": q.accum,
        "float_accuracy": accuracy(net, ev),
        "quantized_accuracy": quantization.quantized_accuracy(logits, ev.labels),
        "analog_cells": quantization.analog_cells(net, assignment, q.n1, run.cfg.crossbar.bits_per_cell),
        "analog_cells_at_n2": quantization.analog_cells(net, assignment, q.n2, run.cfg.crossbar.bits_per_cell),
        "cell_savings": str(quantization.cell_savings(q.n1, run.cfg.crossbar.bits_per_cell, q.n2)),
    }
    return ["quantized.hpim", run.write_json("quantization.json", summary)]


def crossbar_config(cfg: ExperimentConfig, **overrides) -> analog.CrossbarConfig:
    c = cfg.crossbar
    base = analog.CrossbarConfig(rows=c.rows, cols=c.cols, bits_per_cell=c.bits_per_cell,
                                 input_bits_per_cycle=c.input_bits_per_cycle, active_rows=c.active_rows,
                                 mapping=c.mapping, encoding_saves_bit=c.encoding_saves_bit, sigma=c.sigma,
                                 weight_bits=cfg.quant.n1, input_bits=cfg.quant.act_bits, adc_bits=c.adc_bits)
    return base.with_(**overrides)


def allocate_network(net, assignment, scheme, xcfg: analog.CrossbarConfig):
    """Crossbar allocation of every layer's analog partition."""
    allocs = []
    bias = 1 << (scheme.n1 - 1)
    for p, lq in enumerate(scheme.layers):
        w = np.asarray(net.weights[p], dtype=np.float64)
        w4 = w.reshape((1, 1) + w.shape) if w.ndim == 2 else w
        r, k = w4.shape[0], w4.shape[3]
        ana = np.flatnonzero(~np.asarray(assignment.masks[p], dtype=bool))
        if lq.analog is None or len(ana) == 0:
            codes = np.zeros((0, k), dtype=np.int64)
        else:
            sub = np.take(w4, ana, axis=2)
            codes = quantization.quantize(sub, lq.analog).transpose(2, 0, 1, 3).reshape(-1, k) - bias
        allocs.append(analog.map_layer(codes, xcfg, analog.conv_rows(r, ana)))
    return allocs


def stage_simulate(run: RunDir) -> list[str]:
    cfg = run.cfg
    net, assignment, ev = run.model(), run.assignment(), run.split("evaluation")
    scheme, _ = quantization.load_quantized(run.need("quantized.hpim"))
    noise = variation.NoiseModel(cfg.noise.sigma_analog, cfg.noise.sigma_digital, cfg.seed)
    trials = max(cfg.selection.validation_trials, 1)
    hybrid = variation.noisy_accuracy(net, assignment, ev, noise, trials, stream=(2,))
    everything_analog = variation.noisy_accuracy(net, selection.ChannelAssignment.all_analog(net), ev, noise, trials,
                                                 stream=(3,))

    xcfg = crossbar_config(cfg)
    allocs = allocate_network(net, assignment, scheme, xcfg)
    rng = variation.trial_rng(cfg.seed, (4,))
    logits = quantization.hybrid_forward(net, assignment, scheme, ev, cfg.quant.accum,
                                         analog_matmul=analog.crossbar_matmul(xcfg, rng))
    tile = digital.DigitalTileConfig(fill_cycles=cfg.digital.fill_cycles, tiles=cfg.digital.tiles)
    reports = digital.schedule_network(net, assignment, tile)

    out = [run.write_text("trials.csv", hybrid.to_csv()),
           run.write_text("trials_all_analog.csv", everything_analog.to_csv())]
    out.append(run.write_json("allocation.json", {
        "crossbar": analog.to_dict(xcfg),
        "adc_bits": xcfg.resolved_adc_bits,
        "functional_adc_bits": xcfg.functional_adc_bits,
        **analog.allocation_summary(allocs),
    }))
    out.append(run.write_json("cycles.json", {
        "tile": digital.config_dict(tile),
        "layers": [r.to_dict() for r in reports],
        "total_cycles": sum(r.cycles for r in reports),
        "sram_energy": {b: sum(digital.sram_traffic(r, buffer=b) for r in reports)
                        for b in sorted(digital.DEFAULT_ACCESS_ENERGY)},
    }))
    out.append(run.write_text("timeline.csv", digital.timeline_csv(reports)))
    out.append(run.write_json("simulate.json", {
        "clean_accuracy": accuracy(net, ev),
        "hybrid": hybrid.summary(),
        "all_analog": everything_analog.summary(),
        "crossbar_accuracy": quantization.quantized_accuracy(logits, ev.labels),
        "protected_fraction": selection.protected_fraction(assignment, net),
    }))
    return out


def cost_table(cfg: ExperimentConfig) -> cost.ComponentCostTable:
    c = cfg.cost
    if c.table is None:
        return cost.synthetic_table(c.adc_area_share, c.adc_power_share)
    import yaml

    text = Path(c.table).read_text()
    data = json.loads(text) if c.table.endswith(".json") else yaml.safe_load(text)
    return cost.ComponentCostTable.from_dict(data)


def stage_cost(run: RunDir) -> list[str]:
    cfg = run.cfg
    net, assignment = run.model(), run.assignment()
    table = cost_table(cfg)
    reports = [cost.aggregate(d, table) for d in cost.preset_designs(cfg.cost.digital_tiles)]
    rows = cost.efficiency_table(reports)
    savings = {}
    for b in (7, 6):
        area, power = cost.adc_tile_savings(table, b)
        savings[f"8->{b}"] = {"area": area, "power": power}
    movement = {
        "hybridac": cost.data_movement(net, assignment, "hybridac").to_dict(),
        # the same weights protected individually
        "iws-1": cost.data_movement(net, assignment.to_weight_mask(net), "iws-1").to_dict(),
    }
    balance = cost.load_balance(*cost.REPORTED_SIDE_EFFICIENCY)
    summary = {
        "table": table.to_dict(),
        "designs": [r.to_dict() for r in reports],
        "adc_tile_savings": savings,
        "load_balance": balance.to_dict(),
        "data_movement": movement,
    }
    return [run.write_json("cost.json", summary), run.write_text("efficiency.csv", cost.table_csv(rows))]


# --------------------------------------------------------------------------
# sweep


CROSSBAR_AXES = ("adc_bits", "active_rows", "r_ratio")


def sweep_mode(cfg: ExperimentConfig) -> str:
    if cfg.sweep.mode != "auto":
        return cfg.sweep.mode
    return "crossbar" if any(a in cfg.sweep.axes for a in CROSSBAR_AXES) else "weight"


def sweep_cells(cfg: ExperimentConfig) -> list[dict]:
    axes = sorted(cfg.sweep.axes)
    return [dict(zip(axes, combo)) for combo in itertools.product(*(cfg.sweep.axes[a] for a in axes))]


def assignment_for_fraction(net, sens, fraction):
    """Most sensitive channels first until ``fraction`` of the weights is digital."""
    a = selection.ChannelAssignment.all_analog(net)
    per = net.weights_per_channel()
    total, have = net.num_params, 0
    for _, p, c in selection.sorted_channels(sens):
        if have >= fraction * total:
            break
        a = a.with_channels([(p, c)])
        have += int(per[p])
    return a


def _cell_assignment(run: RunDir, net, cell):
    if "protected_fraction" in cell:
        return assignment_for_fraction(net, run.sensitivity(), float(cell["protected_fraction"]))
    return run.assignment()


def run_cell(root, cfg_dict, index, cell):
    """Evaluate one sweep cell; returns (index, per-trial accuracies)."""
    from .config import from_dict

    cfg = from_dict(cfg_dict)
    run = RunDir(root, cfg)
    net, ev = run.model(), run.split("evaluation")
    assignment = _cell_assignment(run, net, cell)
    sigma_a = float(cell.get("sigma_analog", cfg.noise.sigma_analog))
    trials = cfg.sweep.trials
    if sweep_mode(cfg) == "weight":
        noise = variation.NoiseModel(sigma_a, cfg.noise.sigma_digital, cfg.seed)
        if sigma_a == 0 and cfg.noise.sigma_digital == 0:
            trials = 1
        return index, variation.noisy_accuracy(net, assignment, ev, noise, trials, stream=(5, index)).accuracies

    q = cfg.quant
    xsigma = float(cell.get("sigma_analog", cfg.crossbar.sigma))
    xcfg = crossbar_config(cfg, sigma=xsigma)
    if "adc_bits" in cell:
        xcfg = xcfg.with_(adc_bits=int(cell["adc_bits"]))
    if "active_rows" in cell:
        xcfg = xcfg.with_(active_rows=int(cell["active_rows"]))
    if "r_ratio" in cell:
        xcfg = xcfg.with_(r_ratio_scale=float(cell["r_ratio"]))
    # digital weights see the configured digital/analog noise ratio applied to the cell sigma
    ratio = cfg.noise.sigma_digital / cfg.noise.sigma_analog if cfg.noise.sigma_analog else 0.0
    dnoise = variation.NoiseModel(0.0, ratio * xsigma, cfg.seed)
    if xsigma == 0:
        trials = 1
    scheme = quantization.calibrate_scheme(net, assignment, run.split("calibration"), q.n1, q.n2, q.act_bits)
    accs = []
    for k in range(trials):
        rng = variation.trial_rng(cfg.seed, (5, index, k))
        logits = quantization.hybrid_forward(net, assignment, scheme, ev, q.accum,
                                             noise=dnoise if dnoise.sigma_digital > 0 else None, rng=rng,
                                             analog_matmul=analog.crossbar_matmul(xcfg, rng))
        accs.append(quantization.quantized_accuracy(logits, ev.labels))
    return index, accs


def _run_cell_packed(args):
    return run_cell(*args)


def stage_sweep(run: RunDir, workers: int = 1, fmt: str = "csv") -> list[str]:
    cfg = run.cfg
    cells = sweep_cells(cfg)
    run.model(), run.split("evaluation")
    if any("protected_fraction" in c for c in cells):
        run.need("sensitivity.hpim")
    else:
        run.need("assignment.hpim")
    jobs = [(str(run.root), cfg.to_dict(), i, c) for i, c in enumerate(cells)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_run_cell_packed, jobs))
    else:
        results = [_run_cell_packed(j) for j in jobs]
    results.sort(key=lambda t: t[0])

    axes = sorted(cfg.sweep.axes)
    mode = sweep_mode(cfg)
    rows, trial_rows = [], []
    for (i, accs), cell in zip(results, cells):
        a = np.asarray(accs, dtype=np.float64)
        rows.append({**cell, "mode": mode, "trials": len(a), "accuracy_mean": float(a.mean()),
                     "accuracy_std": float(a.std(ddof=1)) if len(a) > 1 else 0.0})
        trial_rows += [{**cell, "trial": k, "accuracy": float(v)} for k, v in enumerate(a)]
    if fmt == "json":
        return [run.write_json("sweep.json", {"axes": axes, "mode": mode, "cells": rows}),
                run.write_json("sweep_trials.json", trial_rows)]
    return [run.write_text("sweep.csv", cost.table_csv(rows)),
            run.write_text("sweep_trials.csv", cost.table_csv(trial_rows))]


# --------------------------------------------------------------------------
# report


def _read_json(run: RunDir, name, producer):
    p = run.path(name)
    if not p.exists():
        raise MissingArtifact(p, producer)
    return json.loads(p.read_text())


def report_tables(run: RunDir) -> dict:
    """Summary tables: protection efficacy, quantization, ADC savings, efficiency."""
    train_s = _read_json(run, "train.json", "train")
    sel = _read_json(run, "selection.json", "select")
    quant = _read_json(run, "quantization.json", "quantize")
    sim = _read_json(run, "simulate.json", "simulate")
    cst = _read_json(run, "cost.json", "cost")
    protection = [{
        "model": train_s["preset"],
        "clean_accuracy": sim["clean_accuracy"],
        "all_analog_accuracy": sim["all_analog"]["mean"],
        "hybrid_accuracy": sim["hybrid"]["mean"],
        "protected_pct": 100.0 * sel["protected_fraction"],
        "target": sel["target"],
    }]
    quant_rows = [{
        "n1": quant["scheme"]["n1"], "n2": quant["scheme"]["n2"], "act_bits": quant["scheme"]["act_bits"],
        "float_accuracy": quant["float_accuracy"], "quantized_accuracy": quant["quantized_accuracy"],
        "crossbar_accuracy": sim["crossbar_accuracy"], "cell_savings": quant["cell_savings"],
    }]
    adc_rows = [{"bits": k, "area_saving": v["area"], "power_saving": v["power"]}
                for k, v in sorted(cst["adc_tile_savings"].items())]
    eff_rows = [{"design": d["name"], "area_mm2": d["area"], "power_mw": d["power"],
                 "gops_per_mm2": d["gops_per_mm2"], "gops_per_w": d["gops_per_w"]} for d in cst["designs"]]
    return {"protection": protection, "quantization": quant_rows, "adc_savings": adc_rows, "efficiency": eff_rows}


def stage_report(run: RunDir, fmt: str = "json") -> list[str]:
    tables = report_tables(run)
    if fmt == "json":
        return [run.write_json("report.json", tables)]
    out = []
    for name, rows in tables.items():
        out.append(run.write_text(f"report_{name}.csv", cost.table_csv(rows)))
    return out


# --------------------------------------------------------------------------


def run_stage(stage: str, run: RunDir, workers: int = 1, fmt: str = "csv") -> list[str]:
    if stage == "sweep":
        files = stage_sweep(run, workers, fmt)
    elif stage == "report":
        files = stage_report(run, fmt)
    else:
        files = globals()[f"stage_{stage}"](run)
    run.write_text("config.yaml", dump_yaml(run.cfg))
    write_manifest(run, stage)
    log.info("%s wrote %s", stage, ", ".join(files))
    return files

