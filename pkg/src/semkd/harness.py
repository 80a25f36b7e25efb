"""Experiment orchestration: teacher training, the three methods, reports on disk.

Methods
-------
``no_kd``      every device trains the full teacher architecture from scratch
               on its own shard with cross-entropy.
``static_kd``  every device distils the same fixed number of teacher blocks.
``proposed``   the planner chooses each device's number of distilled blocks.

Files written by :func:`run_experiment` (CSV schema version ``REPORT_SCHEMA``):
``report.csv``, ``summary.csv``, ``plot_data.csv``, ``planner_trace.csv``,
``distill_trace.csv``, ``metadata.json``, ``scenario.yaml``, and the teacher
checkpoints ``teacher_init.mnet`` / ``teacher.mnet``.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
import platform
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .distill import TeacherPair
from .nn import LabeledSet, MicroNet, evaluate_accuracy, make_synthetic_task, train_cross_entropy
from .planner import DeviceContext, DeviceResult, PlannerConfig, StudentEvaluator, objective, run_planner
from .scenario import (ScenarioConfig, dump_scenario, load_scenario, rng_stream, scenario_from_dict,
                       scenario_to_dict)

log = logging.getLogger(__name__)

METHODS = ("no_kd", "static_kd", "proposed")
REPORT_SCHEMA = 1
FIGURE_DEVICES = 5

REPORT_COLUMNS = [
    "method", "device", "n_distilled", "omega", "omega_test", "flops",
    "t_cap", "t_ext", "t_cmp", "t_comm", "t_total",
    "e_cmp", "e_comm", "e_total", "rate_bps", "bandwidth_hz",
    "compression_ratio", "payload_bits", "frame_bits", "slot",
    "deadline_s", "energy_budget_j", "feasible",
    "norm_compute_time", "norm_transmit_energy",
]
SUMMARY_COLUMNS = [
    "method", "mean_omega", "mean_flops", "mean_norm_compute_time", "mean_norm_transmit_energy",
    "objective", "teacher_omega", "feasible_devices", "total_bandwidth_hz",
]
PLOT_COLUMNS = ["figure", "metric", "device", "method", "value", "in_figure"]
PLANNER_COLUMNS = ["k", "device", "n_before", "n_after", "rule", "frozen", "omega", "t_total", "e_total"]
DISTILL_COLUMNS = ["method", "device", "n_distilled", "stage", "epoch", "loss"]


class TeacherBelowThreshold(RuntimeError):
    def __init__(self, accuracy: float, omega_min: float):
        self.accuracy = accuracy
        super().__init__(f"teacher validation accuracy {accuracy:.4f} is below omega_min {omega_min}")


@dataclass
class Dataset:
    train: LabeledSet
    val: LabeledSet
    test: LabeledSet
    shards: list[LabeledSet]


def prepare_data(cfg: ScenarioConfig) -> Dataset:
    """Synthetic splits plus a seeded, equal-size partition of the train split into device shards."""
    train, val, test = make_synthetic_task(cfg.task, cfg.seed)
    order = rng_stream(cfg.seed, "shard").permutation(len(train))
    shards = [train.subset(np.sort(part)) for part in np.array_split(order, cfg.num_devices)]
    return Dataset(train, val, test, shards)


def train_supervised(cfg: ScenarioConfig, data: LabeledSet, val: LabeledSet,
                     rng: np.random.Generator) -> tuple[MicroNet, MicroNet, list[float]]:
    """Cross-entropy training of the full architecture with plateau stopping.

    Returns (warmup snapshot, best-on-validation net, per-epoch validation accuracy).
    """
    t = cfg.teacher
    net = MicroNet.init(cfg.task.input_dim, t.width, t.n_blocks, cfg.task.classes, rng)
    history: list[float] = []
    keep: dict[str, MicroNet] = {}
    best = [-1.0, -1]

    def on_epoch(epoch, current):
        acc = evaluate_accuracy(current, val)
        history.append(acc)
        if epoch == t.warmup_epochs - 1:
            keep["warmup"] = current.copy()
        if acc > best[0]:
            best[:] = [acc, epoch]
            keep["best"] = current.copy()
        return epoch >= t.warmup_epochs - 1 and epoch - best[1] >= t.patience

    train_cross_entropy(net, data, epochs=t.max_epochs, lr=t.learning_rate, batch_size=t.batch_size,
                        rng=rng, callback=on_epoch)
    return keep["warmup"], keep["best"], history


def train_teacher(cfg: ScenarioConfig, data: Dataset) -> TeacherPair:
    warmup, final, history = train_supervised(cfg, data.train, data.val, rng_stream(cfg.seed, "teacher"))
    teachers = TeacherPair.from_nets(warmup, final, data.val)
    log.info("teacher: %d epochs, warmup acc %.3f, final acc %.3f", len(history),
             teachers.initial_accuracy, teachers.final_accuracy)
    if teachers.final_accuracy < cfg.omega_min:
        raise TeacherBelowThreshold(teachers.final_accuracy, cfg.omega_min)
    return teachers


@dataclass
class MethodResult:
    method: str
    n_distilled: list[int]
    results: list[DeviceResult]
    traces: dict = field(default_factory=dict)   # (device, n) -> DistillTrace
    planner_history: list = field(default_factory=list)


def run_baseline_no_kd(cfg: ScenarioConfig, data: Dataset, context: DeviceContext) -> MethodResult:
    results = []
    for u, shard in enumerate(data.shards):
        _, net, _ = train_supervised(cfg, shard, data.val, rng_stream(cfg.seed, "no_kd", u))
        results.append(context.evaluate(u, net))
    return MethodResult("no_kd", [cfg.teacher.n_blocks] * cfg.num_devices, results)


def run_baseline_static_kd(cfg: ScenarioConfig, evaluator: StudentEvaluator) -> MethodResult:
    n = cfg.static_blocks
    results = [evaluator(u, n) for u in range(cfg.num_devices)]
    traces = {(u, n): evaluator.traces[(u, n)] for u in range(cfg.num_devices)}
    return MethodResult("static_kd", [n] * cfg.num_devices, results, traces)


def run_proposed(cfg: ScenarioConfig, evaluator: StudentEvaluator, teachers: TeacherPair) -> MethodResult:
    pcfg = PlannerConfig.from_scenario(cfg)
    run = run_planner(pcfg, evaluator, cfg.num_devices, teachers.final_accuracy)
    state = run.state
    traces = {(u, n): evaluator.traces[(u, n)] for u, n in enumerate(state.n_distilled)}
    return MethodResult("proposed", list(state.n_distilled), list(state.results), traces, run.history)


def _ratio(value: float, base: float) -> float:
    if base == 0:
        return 1.0 if value == 0 else math.inf
    return value / base


@dataclass
class ExperimentReport:
    cfg: ScenarioConfig
    teachers: TeacherPair
    methods: dict[str, MethodResult]

    def feasible(self, u: int, r: DeviceResult) -> bool:
        d = self.cfg.devices[u]
        return r.t_total <= d.deadline_s and r.e_total <= d.energy_budget_j and r.omega >= self.cfg.omega_min

    def normalized(self, method: str, u: int) -> tuple[float, float]:
        """(compute time, transmit energy) relative to the no_kd model of the same device."""
        base = self.methods.get("no_kd")
        if base is None:
            return math.nan, math.nan
        r, b = self.methods[method].results[u], base.results[u]
        return _ratio(r.t_cmp, b.t_cmp), _ratio(r.e_comm, b.e_comm)

    def rows(self) -> list[dict]:
        bandwidths = self.cfg.bandwidths()
        out = []
        for method in METHODS:
            if method not in self.methods:
                continue
            m = self.methods[method]
            for u, r in enumerate(m.results):
                norm_t, norm_e = self.normalized(method, u)
                d = self.cfg.devices[u]
                out.append({
                    "method": method, "device": u, "n_distilled": m.n_distilled[u],
                    "omega": r.omega, "omega_test": r.omega_test, "flops": r.flops,
                    "t_cap": r.t_cap, "t_ext": r.t_ext, "t_cmp": r.t_cmp, "t_comm": r.t_comm,
                    "t_total": r.t_total, "e_cmp": r.e_cmp, "e_comm": r.e_comm, "e_total": r.e_total,
                    "rate_bps": r.rate, "bandwidth_hz": bandwidths[u],
                    "compression_ratio": r.compression_ratio, "payload_bits": r.payload_bits,
                    "frame_bits": r.frame_bits, "slot": r.slot,
                    "deadline_s": d.deadline_s, "energy_budget_j": d.energy_budget_j,
                    "feasible": int(self.feasible(u, r)),
                    "norm_compute_time": norm_t, "norm_transmit_energy": norm_e,
                })
        return out

    def summary(self) -> list[dict]:
        out = []
        total_bw = math.fsum(self.cfg.bandwidths())
        for method in METHODS:
            if method not in self.methods:
                continue
            res = self.methods[method].results
            norms = [self.normalized(method, u) for u in range(len(res))]
            out.append({
                "method": method,
                "mean_omega": float(np.mean([r.omega for r in res])),
                "mean_flops": float(np.mean([r.flops for r in res])),
                "mean_norm_compute_time": float(np.mean([n[0] for n in norms])),
                "mean_norm_transmit_energy": float(np.mean([n[1] for n in norms])),
                "objective": objective([r.omega for r in res], self.teachers.final_accuracy,
                                       self.cfg.device_weights, self.cfg.lam),
                "teacher_omega": self.teachers.final_accuracy,
                "feasible_devices": sum(self.feasible(u, r) for u, r in enumerate(res)),
                "total_bandwidth_hz": total_bw,
            })
        return out

    def plot_rows(self) -> list[dict]:
        figures = [("accuracy", "omega"), ("compute_time", "norm_compute_time"),
                   ("transmit_energy", "norm_transmit_energy")]
        rows = self.rows()
        out = []
        for figure, metric in figures:
            for row in sorted(rows, key=lambda r: (r["device"], METHODS.index(r["method"]))):
                out.append({"figure": figure, "metric": metric, "device": row["device"],
                            "method": row["method"], "value": row[metric],
                            "in_figure": int(row["device"] < FIGURE_DEVICES)})
        return out

    def planner_rows(self) -> list[dict]:
        m = self.methods.get("proposed")
        if m is None:
            return []
        return [{"k": k, "device": ev.device, "n_before": ev.n_before, "n_after": ev.n_after,
                 "rule": ev.rule, "frozen": int(ev.frozen), "omega": r.omega,
                 "t_total": r.t_total, "e_total": r.e_total}
                for k, ev, r in m.planner_history]

    def distill_rows(self) -> list[dict]:
        out = []
        for method in METHODS:
            m = self.methods.get(method)
            if m is None:
                continue
            for (u, n), trace in sorted(m.traces.items()):
                for stage, epoch, loss in trace.rows():
                    out.append({"method": method, "device": u, "n_distilled": n,
                                "stage": stage, "epoch": epoch, "loss": loss})
        return out

    def metadata(self) -> dict:
        return {
            "report_schema": REPORT_SCHEMA,
            "seed": self.cfg.seed,
            "scenario_digest": self.cfg.digest(),
            "methods": [m for m in METHODS if m in self.methods],
            "teacher_omega": self.teachers.final_accuracy,
            "teacher_warmup_omega": self.teachers.initial_accuracy,
            "versions": {"semkd": __version__, "numpy": np.__version__,
                         "python": platform.python_version()},
        }


def run_methods(cfg: ScenarioConfig, methods=METHODS) -> ExperimentReport:
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        raise ValueError(f"unknown method(s): {', '.join(unknown)}")
    data = prepare_data(cfg)
    teachers = train_teacher(cfg, data)
    context = DeviceContext(cfg, data.val, data.test)
    evaluator = StudentEvaluator(cfg, teachers, data.shards, context)
    done: dict[str, MethodResult] = {}
    for method in METHODS:
        if method not in methods:
            continue
        log.info("running %s", method)
        if method == "no_kd":
            done[method] = run_baseline_no_kd(cfg, data, context)
        elif method == "static_kd":
            done[method] = run_baseline_static_kd(cfg, evaluator)
        else:
            done[method] = run_proposed(cfg, evaluator, teachers)
    return ExperimentReport(cfg, teachers, done)


def _csv_text(columns: list[str], rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        # floats round-trip through repr; NaN (no baseline to normalise by) is left blank
        writer.writerow({k: ("" if math.isnan(v) else repr(v)) if isinstance(v, float) else v
                         for k, v in row.items()})
    return buf.getvalue()


def write_report(report: ExperimentReport, out_dir: Path) -> list[Path]:
    """Write every output file into ``out_dir`` (created if needed); returns their paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = {
        "report.csv": _csv_text(REPORT_COLUMNS, report.rows()),
        "summary.csv": _csv_text(SUMMARY_COLUMNS, report.summary()),
        "plot_data.csv": _csv_text(PLOT_COLUMNS, report.plot_rows()),
        "planner_trace.csv": _csv_text(PLANNER_COLUMNS, report.planner_rows()),
        "distill_trace.csv": _csv_text(DISTILL_COLUMNS, report.distill_rows()),
        "metadata.json": json.dumps(report.metadata(), indent=2, sort_keys=True) + "\n",
        "scenario.yaml": dump_scenario(report.cfg),
    }
    paths = []
    for name, text in files.items():
        path = out_dir / name
        path.write_text(text)
        paths.append(path)
    for name, net in (("teacher_init.mnet", report.teachers.initial), ("teacher.mnet", report.teachers.final)):
        path = out_dir / name
        path.write_bytes(net.to_bytes())
        paths.append(path)
    return paths


def run_experiment(scenario, seed: int | None = None, methods=METHODS, out_dir="runs",
                   policy: str | None = None) -> list[Path]:
    """Load a scenario, run ``methods`` and write the report files.

    Outputs are staged in a temporary directory and only moved into ``out_dir``
    once everything succeeded, so a failed run leaves nothing behind.
    """
    if isinstance(scenario, ScenarioConfig):
        cfg = scenario
        if seed is not None:
            # redraw device profiles under the new seed
            data = scenario_to_dict(cfg)
            data.pop("devices")
            cfg = scenario_from_dict(data, seed=seed)
    else:
        cfg = load_scenario(scenario, seed=seed)
    if policy is not None:
        cfg = dataclasses.replace(cfg, planner=dataclasses.replace(cfg.planner, policy=policy))
    out_dir = Path(out_dir)
    out_dir.parent.mkdir(parents=True, exist_ok=True)
    staging = Path(tempfile.mkdtemp(prefix=".semkd-", dir=out_dir.parent))
    try:
        report = run_methods(cfg, methods)
        staged = write_report(report, staging)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = []
        for path in staged:
            target = out_dir / path.name
            shutil.move(str(path), target)
            paths.append(target)
        return paths
    finally:
        shutil.rmtree(staging, ignore_errors=True)
