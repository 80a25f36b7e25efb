"""Iterative sizing of each device's student by its number of distilled blocks.

Every device starts with all teacher blocks. Each iteration scans devices in
index order and applies the first rule that fires:

* within time and energy budgets, accuracy below the floor, room to grow: +1 block
* within budgets, accuracy at or above the floor, more than one block: -1 block
* over the deadline or the energy budget, more than one block: -1 block

Under the default ``single`` policy the scan stops after the first adjustment;
``all`` lets every device move once per iteration. A device whose two
consecutive adjustments point in opposite directions is frozen at the larger
of the two block counts that met its budgets.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np

from .channel import ChannelDraw, ZeroRateError, comm_energy, comm_time, sample_channel, transmission_rate
from .compute import compute_cost
from .distill import TeacherPair, build_student, train_three_stage
from .nn import LabeledSet, MicroNet, evaluate_accuracy, forward
from .scenario import ScenarioConfig, rng_stream
from .semex import channel_encode, compress, stack_from_features

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DeviceResult:
    """Accuracy, latency and energy of one device running one model."""

    n_blocks: int
    omega: float
    omega_test: float
    flops: int
    t_cap: float
    t_ext: float
    t_cmp: float
    e_cmp: float
    t_comm: float
    e_comm: float
    rate: float
    compression_ratio: float
    payload_bits: int
    frame_bits: int
    slot: int

    @property
    def t_total(self) -> float:
        return self.t_comm + self.t_cmp

    @property
    def e_total(self) -> float:
        return self.e_comm + self.e_cmp


def evaluate_device(profile, student: MicroNet, draws: ChannelDraw | Sequence[ChannelDraw], threshold: float, *,
                    probes: np.ndarray, bandwidth: float, noise_power: float, val: LabeledSet,
                    test: LabeledSet | None = None, map_shape=(2, 2), extraction_mode="inference",
                    importance="activation") -> DeviceResult:
    """Accuracy on ``val`` plus time/energy for the worst of the given slots.

    ``probes[t]`` is the input captured in slot ``t``; its last-block features
    are compressed at ``threshold`` to size the upload. A zero-rate slot with a
    non-empty payload gives infinite upload time and energy.
    """
    if isinstance(draws, ChannelDraw):
        draws = [draws]
    probes = np.atleast_2d(probes)
    if len(probes) != len(draws):
        raise ValueError("need one captured input per slot")
    cost = compute_cost(profile, student, extraction_mode)
    fp = forward(student, probes)
    classes = np.argmax(fp.logits, axis=1)
    head_w, _ = student.layer("head")

    worst = None
    for t, draw in enumerate(draws):
        stack = stack_from_features(fp.features[t], map_shape, int(classes[t]),
                                    head_w if student.n_blocks > 0 else None)
        cs = compress(stack, threshold, payload_bits=profile.payload_bits, mode=importance)
        rate = transmission_rate(bandwidth, profile.transmit_power_w, draw.gain, noise_power)
        if cs.compressed_bits == 0:
            t_comm = 0.0
        else:
            try:
                t_comm = comm_time(cs.compressed_bits, rate)
            except ZeroRateError:
                t_comm = math.inf
        if worst is None or t_comm > worst[0]:
            worst = (t_comm, t, rate, cs)
    t_comm, slot, rate, cs = worst
    return DeviceResult(
        n_blocks=student.n_blocks,
        omega=evaluate_accuracy(student, val),
        omega_test=evaluate_accuracy(student, test) if test is not None else math.nan,
        flops=cost.flops,
        t_cap=cost.t_cap,
        t_ext=cost.t_ext,
        t_cmp=cost.t_cmp,
        e_cmp=cost.e_cmp,
        t_comm=t_comm,
        e_comm=comm_energy(t_comm, profile.transmit_power_w),
        rate=rate,
        compression_ratio=cs.ratio,
        payload_bits=cs.compressed_bits,
        frame_bits=8 * len(channel_encode(cs)),
        slot=slot,
    )


class DeviceContext:
    """Per-device channel draws and captured inputs for every slot of a scenario."""

    def __init__(self, cfg: ScenarioConfig, val: LabeledSet, test: LabeledSet):
        self.cfg = cfg
        self.val = val
        self.test = test
        self.bandwidths = cfg.bandwidths()
        self.draws = []
        self.probes = []
        for u, profile in enumerate(cfg.devices):
            self.draws.append([sample_channel(profile, rng_stream(cfg.seed, "channel", u, t))
                               for t in range(cfg.num_slots)])
            idx = [int(rng_stream(cfg.seed, "capture", u, t).integers(len(test))) for t in range(cfg.num_slots)]
            self.probes.append(test.inputs[idx])

    def evaluate(self, u: int, net: MicroNet) -> DeviceResult:
        cfg = self.cfg
        return evaluate_device(cfg.devices[u], net, self.draws[u], cfg.compression_threshold,
                               probes=self.probes[u], bandwidth=self.bandwidths[u],
                               noise_power=cfg.noise_power_w, val=self.val, test=self.test,
                               map_shape=cfg.feature_map_shape, extraction_mode=cfg.extraction_mode,
                               importance=cfg.importance)


class StudentEvaluator:
    """Trains and evaluates the student of device ``u`` with ``n`` blocks, once per (u, n).

    Each (u, n) pair trains from a fresh student on its own seeded stream, so
    results do not depend on the order in which the planner visits them.
    """

    def __init__(self, cfg: ScenarioConfig, teachers: TeacherPair, shards: Sequence[LabeledSet],
                 context: DeviceContext):
        self.cfg = cfg
        self.teachers = teachers
        self.shards = shards
        self.context = context
        self.students: dict[tuple[int, int], MicroNet] = {}
        self.traces = {}
        self._results: dict[tuple[int, int], DeviceResult] = {}

    def student(self, u: int, n: int) -> MicroNet:
        if (u, n) not in self.students:
            rng = rng_stream(self.cfg.seed, "student", u, n)
            fresh = build_student(self.teachers.final, n, rng)
            net, trace = train_three_stage(fresh, self.teachers, self.shards[u], self.cfg.distill, rng)
            self.students[(u, n)] = net
            self.traces[(u, n)] = trace
            log.debug("device %d, %d blocks: stage-3 KL %.4f -> %.4f", u, n,
                      trace.initial_final_kl, trace.final_final_kl)
        return self.students[(u, n)]

    def __call__(self, u: int, n: int) -> DeviceResult:
        if (u, n) not in self._results:
            self._results[(u, n)] = self.context.evaluate(u, self.student(u, n))
        return self._results[(u, n)]


@dataclass(frozen=True)
class PlannerConfig:
    max_iterations: int
    omega_min: float
    deadlines: tuple[float, ...]
    budgets: tuple[float, ...]
    n_blocks: int
    epsilon: float = 0.0
    weights: tuple[float, ...] = ()
    lam: float = 1.0
    policy: str = "single"

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.policy not in ("single", "all"):
            raise ValueError(f"unknown adjustment policy {self.policy!r}")

    @classmethod
    def from_scenario(cls, cfg: ScenarioConfig) -> PlannerConfig:
        return cls(
            max_iterations=cfg.planner.max_iterations,
            omega_min=cfg.omega_min,
            deadlines=tuple(d.deadline_s for d in cfg.devices),
            budgets=tuple(d.energy_budget_j for d in cfg.devices),
            n_blocks=cfg.teacher.n_blocks,
            epsilon=cfg.planner.epsilon,
            weights=cfg.device_weights,
            lam=cfg.lam,
            policy=cfg.planner.policy,
        )

    def within_budgets(self, u: int, r: DeviceResult) -> bool:
        return r.t_total <= self.deadlines[u] and r.e_total <= self.budgets[u]

    def feasible(self, u: int, r: DeviceResult) -> bool:
        return self.within_budgets(u, r) and r.omega >= self.omega_min


@dataclass(frozen=True)
class PlanEvent:
    device: int
    n_before: int
    n_after: int
    rule: str           # "increase", "decrease", "over_budget"
    frozen: bool = False


@dataclass(frozen=True)
class PlanState:
    n_distilled: tuple[int, ...]
    results: tuple[DeviceResult, ...]
    prev_n_distilled: tuple[int, ...]
    last_move: tuple[int, ...]
    frozen: frozenset = frozenset()
    converged: bool = False
    iteration: int = 0
    events: tuple[PlanEvent, ...] = ()


def objective(omegas: Sequence[float], omega_teacher: float, weights: Sequence[float], lam: float) -> float:
    """Weighted student accuracy plus the weighted teacher accuracy."""
    if len(omegas) != len(weights):
        raise ValueError(f"{len(omegas)} accuracies but {len(weights)} weights")
    return float(sum(w * o for w, o in zip(weights, omegas)) + lam * omega_teacher)


def decide(cfg: PlannerConfig, u: int, n: int, r: DeviceResult) -> tuple[int, str | None]:
    """Block-count change and rule name for one device, or (0, None)."""
    if cfg.within_budgets(u, r):
        if r.omega < cfg.omega_min and n < cfg.n_blocks:
            return +1, "increase"
        if r.omega >= cfg.omega_min and n > 1:
            return -1, "decrease"
        return 0, None
    if n > 1:
        return -1, "over_budget"
    # over budget with a single block: nothing left to remove
    return 0, None


Evaluate = Callable[[int, int], DeviceResult]


def plan_step(state: PlanState, cfg: PlannerConfig, evaluate: Evaluate) -> PlanState:
    """One outer iteration; returns a new state and leaves ``state`` untouched."""
    n_distilled = list(state.n_distilled)
    results = list(state.results)
    last_move = list(state.last_move)
    frozen = set(state.frozen)
    events = []

    for u in range(len(n_distilled)):
        if u in frozen:
            continue
        n = n_distilled[u]
        move, rule = decide(cfg, u, n, results[u])
        if not move:
            continue
        new_n, freeze = n + move, False
        if last_move[u] == -move:
            # reversal: settle on the larger count whose evaluation met the budgets
            hi, lo = max(n, n + move), min(n, n + move)
            new_n = hi if cfg.within_budgets(u, evaluate(u, hi)) else lo
            freeze = True
            frozen.add(u)
        if new_n != n:
            n_distilled[u] = new_n
            results[u] = evaluate(u, new_n)
            last_move[u] = move
        events.append(PlanEvent(u, n, new_n, rule, freeze))
        log.debug("device %d: %s %d -> %d%s", u, rule, n, new_n, " (frozen)" if freeze else "")
        if cfg.policy == "single":
            break

    if not events:
        return dataclasses.replace(state, converged=True, events=())
    return dataclasses.replace(
        state,
        n_distilled=tuple(n_distilled),
        results=tuple(results),
        prev_n_distilled=state.n_distilled,
        last_move=tuple(last_move),
        frozen=frozenset(frozen),
        converged=False,
        events=tuple(events),
    )


def initial_state(cfg: PlannerConfig, evaluate: Evaluate, num_devices: int) -> PlanState:
    n = (cfg.n_blocks,) * num_devices
    return PlanState(
        n_distilled=n,
        results=tuple(evaluate(u, cfg.n_blocks) for u in range(num_devices)),
        prev_n_distilled=n,
        last_move=(0,) * num_devices,
    )


@dataclass
class PlannerRun:
    state: PlanState
    history: list[tuple[int, PlanEvent, DeviceResult]] = field(default_factory=list)
    objectives: list[float] = field(default_factory=list)
    stop_reason: str = ""


def run_planner(cfg: PlannerConfig, evaluate: Evaluate, num_devices: int, omega_teacher: float) -> PlannerRun:
    """Start from all blocks and iterate ``plan_step`` until no rule fires, the objective
    moves by less than ``epsilon``, or ``max_iterations`` is reached."""
    state = initial_state(cfg, evaluate, num_devices)
    weights = cfg.weights or (1.0 / num_devices,) * num_devices

    def score(s):
        return objective([r.omega for r in s.results], omega_teacher, weights, cfg.lam)

    run = PlannerRun(state, objectives=[score(state)])
    for k in range(1, cfg.max_iterations + 1):
        nxt = dataclasses.replace(plan_step(run.state, cfg, evaluate), iteration=k)
        for ev in nxt.events:
            run.history.append((k, ev, nxt.results[ev.device]))
        run.state = nxt
        if nxt.converged:
            run.stop_reason = "converged"
            break
        run.objectives.append(score(nxt))
        if cfg.epsilon > 0 and abs(run.objectives[-1] - run.objectives[-2]) < cfg.epsilon:
            run.stop_reason = "objective_tolerance"
            break
    else:
        run.stop_reason = "max_iterations"
    log.info("planner stopped after %d iterations (%s): blocks %s", run.state.iteration,
             run.stop_reason, run.state.n_distilled)
    return run
