import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semkd.channel import ChannelDraw
from semkd.harness import prepare_data, train_teacher
from semkd.nn import MicroNet
from semkd.planner import (DeviceContext, DeviceResult, PlannerConfig, StudentEvaluator, decide, evaluate_device,
                           initial_state, objective, plan_step, run_planner)

from conftest import tiny_scenario

N_BLOCKS = 4


def result(omega, t=0.1, e=0.1, n=1):
    return DeviceResult(n_blocks=n, omega=omega, omega_test=omega, flops=0, t_cap=0.0, t_ext=t, t_cmp=t,
                        e_cmp=e, t_comm=0.0, e_comm=0.0, rate=1.0, compression_ratio=0.0, payload_bits=0,
                        frame_bits=0, slot=0)


def pcfg(num_devices=1, policy="single", epsilon=0.0, max_iterations=100):
    return PlannerConfig(max_iterations=max_iterations, omega_min=0.8, deadlines=(0.5,) * num_devices,
                         budgets=(0.5,) * num_devices, n_blocks=N_BLOCKS, epsilon=epsilon, policy=policy)


class Table:
    """Stub evaluator from a function (u, n) -> (omega, t, e); counts calls."""

    def __init__(self, fn):
        self.fn = fn
        self.calls = []

    def __call__(self, u, n):
        self.calls.append((u, n))
        omega, t, e = self.fn(u, n)
        return result(omega, t, e, n)


class TestDecide:
    @pytest.mark.parametrize("n, r, expected", [
        (2, result(0.7), (+1, "increase")),
        (2, result(0.85), (-1, "decrease")),
        (2, result(0.85, t=0.6), (-1, "over_budget")),
        (2, result(0.85, e=0.6), (-1, "over_budget")),
        (N_BLOCKS, result(0.7), (0, None)),
        (1, result(0.9), (0, None)),
        (1, result(0.9, t=0.6), (0, None)),
    ])
    def test_rules(self, n, r, expected):
        assert decide(pcfg(), 0, n, r) == expected

    def test_boundaries_are_inclusive(self):
        # exactly at the deadline, budget and floor counts as satisfied
        assert decide(pcfg(), 0, 2, result(0.8, t=0.5, e=0.5)) == (-1, "decrease")


def test_objective():
    assert objective([0.8, 0.9], 0.95, [0.5, 0.5], 1.0) == pytest.approx(1.8)
    with pytest.raises(ValueError):
        objective([0.8], 0.9, [0.5, 0.5], 1.0)


def test_config_validation():
    with pytest.raises(ValueError):
        dataclasses.replace(pcfg(), max_iterations=0)
    with pytest.raises(ValueError):
        dataclasses.replace(pcfg(), epsilon=-1.0)
    with pytest.raises(ValueError):
        dataclasses.replace(pcfg(), policy="random")


class TestRun:
    def test_all_shrink_to_one(self):
        ev = Table(lambda u, n: (0.9, 0.1, 0.1))
        run = run_planner(pcfg(3), ev, 3, 0.95)
        assert run.state.n_distilled == (1, 1, 1)
        assert run.stop_reason == "converged"
        # single policy: one move per iteration, 3 moves per device, then a quiet pass
        assert run.state.iteration == 3 * (N_BLOCKS - 1) + 1

    def test_all_policy_moves_together(self):
        ev = Table(lambda u, n: (0.9, 0.1, 0.1))
        run = run_planner(pcfg(3, policy="all"), ev, 3, 0.95)
        assert run.state.n_distilled == (1, 1, 1)
        assert run.state.iteration == N_BLOCKS

    def test_over_budget_stays_at_one(self):
        ev = Table(lambda u, n: (0.9, 1.0, 1.0))
        run = run_planner(pcfg(1), ev, 1, 0.95)
        assert run.state.n_distilled == (1,)
        assert [e.rule for _, e, _ in run.history] == ["over_budget"] * 3
        assert run.stop_reason == "converged"

    def test_unreachable_accuracy_keeps_all_blocks(self):
        run = run_planner(pcfg(1), Table(lambda u, n: (0.5, 0.1, 0.1)), 1, 0.95)
        assert run.state.n_distilled == (N_BLOCKS,) and not run.history

    def test_oscillation_frozen_at_larger_feasible(self):
        # one block is too weak, two are enough: decrease to 1, bounce back to 2 and freeze
        ev = Table(lambda u, n: (0.7 if n == 1 else 0.9, 0.1, 0.1))
        run = run_planner(pcfg(1), ev, 1, 0.95)
        assert run.state.n_distilled == (2,)
        assert run.state.frozen == frozenset({0})
        rules = [(e.rule, e.n_after, e.frozen) for _, e, _ in run.history]
        assert rules == [("decrease", 3, False), ("decrease", 2, False), ("decrease", 1, False),
                         ("increase", 2, True)]

    def test_oscillation_frozen_at_smaller_when_larger_over_budget(self):
        # two or more blocks break the deadline, one block is too weak
        ev = Table(lambda u, n: (0.7 if n == 1 else 0.9, 0.1 if n == 1 else 0.9, 0.1))
        run = run_planner(pcfg(1), ev, 1, 0.95)
        assert run.state.n_distilled == (1,)
        assert run.history[-1][1].frozen and run.history[-1][1].n_after == 1

    def test_epsilon_stop(self):
        run = run_planner(pcfg(2, epsilon=1e-6), Table(lambda u, n: (0.9, 0.1, 0.1)), 2, 0.95)
        assert run.stop_reason == "objective_tolerance"
        assert run.state.iteration == 1

    def test_max_iterations(self):
        run = run_planner(pcfg(2, max_iterations=2), Table(lambda u, n: (0.9, 0.1, 0.1)), 2, 0.95)
        assert run.stop_reason == "max_iterations"
        assert run.state.iteration == 2

    def test_objective_trace(self):
        run = run_planner(pcfg(2), Table(lambda u, n: (0.8 + 0.01 * n, 0.1, 0.1)), 2, 0.95)
        assert run.objectives[0] == pytest.approx(0.84 + 0.95)
        assert run.objectives[-1] == pytest.approx(0.81 + 0.95)


def test_converged_step_is_idempotent():
    cfg = pcfg(2)
    ev = Table(lambda u, n: (0.9, 0.1, 0.1))
    state = run_planner(cfg, ev, 2, 0.95).state
    assert state.converged
    again = plan_step(state, cfg, ev)
    assert again == state
    assert plan_step(again, cfg, ev) == again


def test_plan_step_is_pure():
    cfg = pcfg(2)
    ev = Table(lambda u, n: (0.9, 0.1, 0.1))
    state = initial_state(cfg, ev, 2)
    snapshot = dataclasses.replace(state)
    plan_step(state, cfg, ev)
    assert state == snapshot


outcome = st.tuples(st.sampled_from([0.5, 0.79, 0.8, 0.95]), st.sampled_from([0.1, 0.5, 0.7]),
                    st.sampled_from([0.1, 0.5, 0.9]))


@settings(max_examples=150, deadline=None)
@given(table=st.lists(st.lists(outcome, min_size=N_BLOCKS, max_size=N_BLOCKS), min_size=1, max_size=4),
       policy=st.sampled_from(["single", "all"]))
def test_planner_invariants(table, policy):
    u_count = len(table)
    cfg = pcfg(u_count, policy=policy, max_iterations=10 * u_count * N_BLOCKS)
    ev = Table(lambda u, n: table[u][n - 1])
    state = initial_state(cfg, ev, u_count)
    for _ in range(cfg.max_iterations):
        nxt = plan_step(state, cfg, ev)
        steps = [abs(a - b) for a, b in zip(nxt.n_distilled, state.n_distilled)]
        assert max(steps) <= 1
        if policy == "single":
            assert sum(steps) <= 1 and len(nxt.events) <= 1
        assert all(1 <= n <= N_BLOCKS for n in nxt.n_distilled)
        if nxt.converged:
            break
        state = nxt
    else:
        pytest.fail("planner did not converge")
    # at convergence no rule fires for any unfrozen device
    for u, (n, r) in enumerate(zip(nxt.n_distilled, nxt.results)):
        assert r.n_blocks == n
        if u not in nxt.frozen:
            assert decide(cfg, u, n, r) == (0, None)


@pytest.fixture(scope="module")
def tiny_world():
    cfg = tiny_scenario(seed=1, omega_min=0.5)
    data = prepare_data(cfg)
    teachers = train_teacher(cfg, data)
    return cfg, data, teachers


def _evaluator(world):
    cfg, data, teachers = world
    return StudentEvaluator(cfg, teachers, data.shards, DeviceContext(cfg, data.val, data.test))


def test_student_evaluator_order_independent(tiny_world):
    a, b = _evaluator(tiny_world), _evaluator(tiny_world)
    first = [a(0, 3), a(0, 1), a(1, 2)]
    second = [b(1, 2), b(0, 1), b(0, 3)]
    assert first == second[::-1]
    assert np.array_equal(a.student(0, 1).params, b.student(0, 1).params)


def test_student_evaluator_caches(tiny_world):
    ev = _evaluator(tiny_world)
    assert ev(2, 2) is ev(2, 2)
    assert len(ev.traces) == 1


class TestEvaluateDevice:
    def setup_method(self):
        cfg = tiny_scenario(seed=3)
        self.cfg = cfg
        data = prepare_data(cfg)
        self.val, self.test = data.val, data.test
        self.net = MicroNet.init(6, 8, 2, 4, np.random.default_rng(0))
        self.profile = cfg.devices[0]

    def run(self, draws, threshold=0.0, profile=None, probes=None):
        slots = 1 if isinstance(draws, ChannelDraw) else len(draws)
        if probes is None:
            probes = self.test.inputs[:slots]
        return evaluate_device(profile or self.profile, self.net, draws, threshold, probes=probes,
                               bandwidth=1e6, noise_power=1e-11, val=self.val, test=self.test)

    def test_full_payload(self):
        r = self.run(ChannelDraw(1.0, 1e-9, 1e-9))
        assert r.compression_ratio == 0.0
        assert r.payload_bits == self.profile.payload_bits
        assert r.t_comm == pytest.approx(r.payload_bits / r.rate, rel=1e-12)
        assert r.e_comm == pytest.approx(r.t_comm * self.profile.transmit_power_w, rel=1e-12)
        assert r.frame_bits == 8 * (11 + 1) + 32 * 8

    def test_worst_slot(self):
        good, bad = ChannelDraw(1.0, 1e-9, 1e-9), ChannelDraw(0.01, 1e-9, 1e-11)
        probes = self.test.inputs[[0, 0]]
        r = self.run([good, bad], probes=probes)
        assert r.slot == 1
        assert r.t_comm == pytest.approx(self.run(bad).t_comm, rel=1e-12)

    def test_zero_rate(self):
        r = self.run(ChannelDraw(0.0, 1e-9, 0.0))
        assert math.isinf(r.t_comm) and math.isinf(r.e_comm)

    def test_zero_payload_zero_time(self):
        profile = dataclasses.replace(self.profile, payload_bits=0.0)
        r = self.run(ChannelDraw(0.0, 1e-9, 0.0), profile=profile)
        assert r.t_comm == 0.0 and r.e_comm == 0.0

    def test_probe_count_must_match(self):
        with pytest.raises(ValueError):
            self.run([ChannelDraw(1, 1, 1)] * 2, probes=self.test.inputs[:1])
