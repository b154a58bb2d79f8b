import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from thermsched.errors import InfeasibleThermal, MotExceedsBudget, NoSolution
from thermsched.analysis import TaskSpec
from thermsched.servers import (
    GpuServerSpec, ServerSpec, Unconstrained, apply_mot_reservation, cpu_gpu_budgets,
    deferrable_budget, design_budget, max_server_utilization, pattern_peak,
    polling_budget_multicore, polling_budget_single, server_jitter, sporadic_budget,
    steady_start_temp, steady_start_temp_pattern, worst_case_pattern,
)
from thermsched.thermal import CoreModel, ScalarThermalParams, evolve_piecewise

P = ScalarThermalParams(alpha=110.0, beta=-0.05)


def cold_start_peak(p, burn, period, seconds):
    """Peak of a burn/sleep pattern simulated from zero long enough to settle."""
    core = CoreModel(p.beta, -p.beta * p.alpha)
    cycles = int(math.ceil(seconds / period))
    _, peak, _ = evolve_piecewise([0.0], [burn, period - burn] * cycles, [[1.0], [0.0]] * cycles,
                                  core)
    return float(peak[0])


def bisect_budget(p, theta_max, period, seconds):
    lo, hi = 0.0, period
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if cold_start_peak(p, mid, period, seconds) <= theta_max else (lo, mid)
    return lo


# ---- specs ------------------------------------------------------------------

def test_server_spec_validation():
    with pytest.raises(ValueError):
        ServerSpec(0, 10)
    with pytest.raises(ValueError):
        ServerSpec(11, 10)
    with pytest.raises(ValueError):
        ServerSpec(5, 10, policy="bogus")
    with pytest.raises(ValueError):
        ServerSpec(5, 10, policy="polling", mot_reserve=1)
    with pytest.raises(ValueError):
        ServerSpec(5, 10, mot_reserve=5)
    s = ServerSpec(5, 10, mot_reserve=2)
    assert s.regular_budget == 3 and s.utilization == 0.5
    with pytest.raises(ValueError):
        GpuServerSpec(3, 2)


def test_jitter():
    assert server_jitter(ServerSpec(3, 10, "polling")) == 10
    assert server_jitter(ServerSpec(3, 10, "sporadic")) == 7
    assert server_jitter(ServerSpec(3, 10, "deferrable")) == 7


# ---- budgets ------------------------------------------------------------------

def test_polling_budget_matches_cold_start_oracle():
    # oracle: bisection on the exactly simulated pattern, 200 s from zero
    c = polling_budget_single(50.0, 0.1, P)
    assert c == pytest.approx(bisect_budget(P, 50.0, 0.1, 200.0), rel=1e-4)
    # ln((110 - 50 (1 - e^-0.005)) / 110) / -0.05 by hand
    assert c == pytest.approx(0.0453926, rel=1e-5)


def test_budget_is_steady_start_consistent():
    c = polling_budget_single(50.0, 0.1, P)
    start = steady_start_temp(50.0, 0.1, P)
    assert start == pytest.approx(steady_start_temp_pattern(P, c, 0.1), rel=1e-9)
    # burning the budget from the start temperature ends exactly at the bound
    end = P.alpha + (start - P.alpha) * math.exp(P.beta * c)
    assert end == pytest.approx(50.0, rel=1e-9)


def test_sporadic_equals_multicore_polling_and_lam_shrinks_budget():
    p2 = ScalarThermalParams(alpha=110.0, beta=-0.05, lam=1.3)
    assert sporadic_budget(50, 0.01, p2) == polling_budget_multicore(50, 0.01, p2)
    assert polling_budget_multicore(50, 0.01, p2) < polling_budget_multicore(50, 0.01, P)
    assert polling_budget_multicore(65, 0.01, p2) == pytest.approx(
        polling_budget_single(50, 0.01, P))


def test_deferrable_back_to_back_is_safe_and_halving_is_more_conservative():
    c = deferrable_budget(50.0, 0.01, P)
    peak = pattern_peak(P, *worst_case_pattern("deferrable", c, 0.01))
    assert peak == pytest.approx(50.0, abs=1e-6)
    assert deferrable_budget(50.0, 0.01, P, halving=True) < c < polling_budget_single(50, 0.01, P)


def test_unconstrained_and_infeasible():
    with pytest.warns(Unconstrained):
        assert polling_budget_single(200.0, 0.01, P) == 0.01
    with pytest.raises(InfeasibleThermal):
        polling_budget_single(0.0, 0.01, P)
    with pytest.raises(ValueError):
        design_budget("bogus", 50, 0.01, P)


def test_utilization_limit():
    # short periods approach theta_max / alpha
    T = 1e-4 / abs(P.beta)
    assert polling_budget_single(50.0, T, P) / T == pytest.approx(50 / 110, abs=1e-3)
    assert max_server_utilization(50, P) == pytest.approx(50 / 110)
    assert max_server_utilization(500, P) == 1.0


@settings(max_examples=60, deadline=None)
@given(st.floats(20, 200), st.floats(-0.5, -0.005), st.floats(0.05, 0.95),
       st.floats(1e-3, 2.0), st.floats(1.0, 1.5), st.sampled_from(["polling", "deferrable"]))
def test_budget_pattern_peak_hits_bound(alpha, beta, frac, period, lam, policy):
    p = ScalarThermalParams(alpha=alpha, beta=beta, lam=lam)
    theta = frac * alpha
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", Unconstrained)
        c = design_budget(policy, theta, period, p)
    if c >= period:
        return
    peak = lam * pattern_peak(p, *worst_case_pattern(policy, c, period))
    assert peak == pytest.approx(theta, rel=1e-6)
    bigger = lam * pattern_peak(p, *worst_case_pattern(policy, min(1.1 * c, period), period))
    assert bigger > theta


@settings(max_examples=40, deadline=None)
@given(st.floats(0.05, 0.9), st.floats(0.05, 0.9), st.floats(1e-3, 0.5))
def test_budget_monotone_in_bound_and_period(f1, f2, period):
    lo, hi = sorted((f1, f2))
    assert polling_budget_single(lo * 100, period, P) <= polling_budget_single(hi * 100, period, P)
    assert polling_budget_single(lo * 100, period, P) <= polling_budget_single(
        lo * 100, 2 * period, P)


# ---- CPU + GPU -----------------------------------------------------------------

def test_cpu_gpu_budgets_meet_both_bounds():
    cpu = ScalarThermalParams(alpha=110.0, beta=-0.05, lam=1.2)
    gpu = ScalarThermalParams(alpha=70.0, beta=-0.08)
    g = (0.05, 0.1)
    c_cpu, c_gpu = cpu_gpu_budgets(52, 45, 0.01, 0.02, cpu, gpu, g)
    x = pattern_peak(cpu, [c_cpu, 0.01 - c_cpu], [1, 0])
    y = pattern_peak(gpu, [c_gpu, 0.02 - c_gpu], [1, 0])
    assert 1.2 * x + g[0] * y == pytest.approx(52, rel=1e-6)
    assert y + g[1] * x == pytest.approx(45, rel=1e-6)


def test_cpu_gpu_no_solution():
    cpu = ScalarThermalParams(alpha=110.0, beta=-0.05)
    gpu = ScalarThermalParams(alpha=70.0, beta=-0.08)
    with pytest.raises(NoSolution):
        cpu_gpu_budgets(52, 45, 0.01, 0.02, cpu, gpu, 1.5)
    with pytest.raises(NoSolution):
        cpu_gpu_budgets(5, 45, 0.01, 0.02, cpu, gpu, 0.5)


# ---- MOT ------------------------------------------------------------------------

def test_mot_reservation():
    tasks = [TaskSpec(c1=10, period=100, priority=1, m1=30, k=5, m2=40, uses_gpu=True),
             TaskSpec(c1=10, period=100, priority=0)]
    assert apply_mot_reservation(500, tasks) == (460, 40)
    with pytest.raises(MotExceedsBudget):
        apply_mot_reservation(40, tasks)
    with pytest.raises(ValueError):
        apply_mot_reservation(500, tasks, "polling")
    assert apply_mot_reservation(500, tasks[1:]) == (500, 0)
