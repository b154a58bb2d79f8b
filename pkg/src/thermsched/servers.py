"""Thermally safe budgets for CPU and GPU servers.

Budget formulas work in seconds on temperature rises over ambient.  The
scheduling entities below carry integer microseconds, which is what the
analysis and the simulator consume.
"""

from dataclasses import dataclass
import math
import warnings

import numpy as np

from .errors import InfeasibleThermal, MotExceedsBudget, NoSolution
from .thermal import CoreModel, evolve_piecewise

POLICIES = ("polling", "deferrable", "sporadic")


class Unconstrained(UserWarning):
    """The thermal bound cannot be reached even at full utilization."""


@dataclass(frozen=True)
class ServerSpec:
    budget: int          # us
    period: int          # us
    policy: str = "sporadic"
    core: int = 0
    criticality: int = 0
    mot_reserve: int = 0  # us carved out of the budget for GPU data transfers

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise ValueError(f"unknown policy {self.policy!r}")
        if not 0 < self.budget <= self.period:
            raise ValueError("need 0 < budget <= period")
        if self.mot_reserve < 0 or self.mot_reserve >= self.budget:
            raise ValueError("need 0 <= mot_reserve < budget")
        if self.policy == "polling" and self.mot_reserve:
            raise ValueError("a polling server cannot hold a MOT reserve")

    @property
    def regular_budget(self):
        return self.budget - self.mot_reserve

    @property
    def utilization(self):
        return self.budget / self.period


@dataclass(frozen=True)
class GpuServerSpec:
    budget: int   # us
    period: int   # us

    def __post_init__(self):
        if not 0 < self.budget <= self.period:
            raise ValueError("need 0 < budget <= period")

    policy = "sporadic"


def _awake_time(theta_max, period, alpha, beta):
    if theta_max <= 0:
        raise InfeasibleThermal("thermal bound must be above ambient")
    if theta_max >= alpha:
        warnings.warn(f"theta_max={theta_max:.4g} >= alpha={alpha:.4g}; budget is the full period",
                      Unconstrained, stacklevel=3)
        return period
    t_wk = math.log((theta_max * math.expm1(beta * period) + alpha) / alpha) / beta
    if not t_wk > 0:
        raise InfeasibleThermal(f"no positive budget for period {period}")
    return min(t_wk, period)


def steady_start_temp(theta_max, period, p):
    """Temperature at the start of a burn in the periodic worst case (single node)."""
    e = math.exp(p.beta * period)
    return p.alpha * theta_max * e / (theta_max * (e - 1.0) + p.alpha)


def polling_budget_single(theta_max, period, p):
    return _awake_time(theta_max, period, p.alpha, p.beta)


def polling_budget_multicore(theta_max, period, p):
    """Budget when every node burns in phase; neighbours amplify by ``p.lam``."""
    return _awake_time(theta_max / p.lam, period, p.alpha, p.beta)


def sporadic_budget(theta_max, period, p):
    return polling_budget_multicore(theta_max, period, p)


def deferrable_budget(theta_max, period, p, halving=False):
    """Budget safe against back-to-back bursts across a replenishment boundary.

    With ``halving`` the polling budget is simply halved, which is more
    conservative than the default closed form.
    """
    if halving:
        return polling_budget_multicore(theta_max, period, p) / 2.0
    # two budgets back to back followed by two periods' worth of sleep
    return _awake_time(theta_max / p.lam, 2.0 * period, p.alpha, p.beta) / 2.0


def design_budget(policy, theta_max, period, p, halving=False):
    if policy in ("polling", "sporadic"):
        return polling_budget_multicore(theta_max, period, p)
    if policy == "deferrable":
        return deferrable_budget(theta_max, period, p, halving=halving)
    raise ValueError(f"unknown policy {policy!r}")


def max_server_utilization(theta_max, p):
    return min(1.0, max(0.0, theta_max / (p.lam * p.alpha)))


def cpu_gpu_budgets(theta_max_cpu, theta_max_gpu, period_cpu, period_gpu, cpu_p, gpu_p,
                    gamma_cross):
    """Budgets for a CPU server and the GPU server that heat each other.

    Node temperatures are modelled as own rise plus conducted rise:
    cpu = lam*x + g_cg*y and gpu = y + g_gc*x, where x and y are the own
    peaks.  Both bounds are met with equality, which fixes x and y.
    ``gamma_cross`` is either one coefficient or (g_cg, g_gc).
    """
    g_cg, g_gc = (gamma_cross, gamma_cross) if np.isscalar(gamma_cross) else gamma_cross
    if period_cpu <= 0 or period_gpu <= 0:
        raise ValueError("periods must be > 0")
    lam = cpu_p.lam
    det = lam - g_cg * g_gc
    if det <= 0:
        raise NoSolution("conduction too strong for both bounds to hold")
    x = (theta_max_cpu - g_cg * theta_max_gpu) / det
    y = (lam * theta_max_gpu - g_gc * theta_max_cpu) / det
    if x <= 0 or y <= 0:
        raise NoSolution("one node's bound is exhausted by conduction alone")
    try:
        c_cpu = _awake_time(x, period_cpu, cpu_p.alpha, cpu_p.beta)
        c_gpu = _awake_time(y, period_gpu, gpu_p.alpha, gpu_p.beta)
    except InfeasibleThermal as exc:
        raise NoSolution(str(exc)) from exc
    return c_cpu, c_gpu


def apply_mot_reservation(budget, tasks, policy="sporadic"):
    """Reserve the longest GPU data-transfer phase out of ``budget``.

    Returns (budget left for normal execution, reserve).
    """
    if policy == "polling":
        raise ValueError("MOT reservation needs a deferrable or sporadic server")
    mot = max((max(t.m1, t.m2) for t in tasks if t.uses_gpu), default=0)
    if mot and mot >= budget:
        raise MotExceedsBudget(f"reserve {mot} >= budget {budget}")
    return budget - mot, mot


def server_jitter(spec):
    if spec.policy == "polling":
        return spec.period
    return spec.period - spec.budget


def worst_case_pattern(policy, budget, period):
    """One cycle of the hottest legal execution pattern as (durations, on flags).

    Polling and sporadic: burn the budget at the start of every period.
    Deferrable: two budgets back to back, then sleep for the rest of two periods.
    """
    if policy == "deferrable":
        return [2 * budget, 2 * (period - budget)], [1.0, 0.0]
    return [budget, period - budget], [1.0, 0.0]


def pattern_peak(p, durations, on, cycles=50, theta0=None):
    """Peak rise of a node repeating a burn/sleep pattern.

    Starts from the analytic steady start of the pattern unless ``theta0``
    is given, then runs ``cycles`` repetitions exactly.
    """
    core = CoreModel(p.beta, -p.beta * p.alpha)   # unit power heats toward alpha
    if theta0 is None:
        burn = sum(d for d, f in zip(durations, on) if f)
        total = sum(durations)
        theta0 = steady_start_temp_pattern(p, burn, total)
    _, peak, _ = evolve_piecewise([theta0], list(durations) * cycles,
                                  [[f] for f in on] * cycles, core)
    return float(peak[0])


def steady_start_temp_pattern(p, burn, total):
    """Temperature at the start of a burn in the steady orbit of burn/(total - burn)."""
    e_on = math.exp(p.beta * burn)
    e_off = math.exp(p.beta * (total - burn))
    return p.alpha * (1.0 - e_on) * e_off / (1.0 - e_on * e_off)


def coupled_peak(own_peak, p):
    """Hottest node when all nodes follow the same pattern in phase."""
    return p.lam * own_peak
