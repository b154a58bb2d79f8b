"""Mixed-criticality planning driven by ambient temperature.

Each criticality level keeps only the servers whose criticality is at least
that level.  An idle server per core models the cooling time a level needs;
if it is schedulable behind the level's servers the level is thermally safe.
Server budgets and periods are integer microseconds, everything else here is
seconds and degrees C.
"""

from dataclasses import dataclass, field
import math

import numpy as np
from numba import njit
from scipy.optimize import brentq

from .errors import Infeasible, InfeasibleIdle
from .thermal import CoreModel, PeriodicPowerSignal, _peak_rise, _sig_S, shifting_time

US = 1e-6
SHUTDOWN = "SHUTDOWN"
RUNNING = "M"
SHIFTING = "S"


@dataclass(frozen=True)
class IdleServerSpec:
    util: float          # fraction of each idle period the core must rest
    period: float        # s
    level: int
    per_core: bool = True

    def __post_init__(self):
        if not 0.0 < self.util < 1.0:
            raise ValueError("idle util must be in (0, 1)")
        if not self.period > 0.0:
            raise ValueError("idle period must be > 0")


@dataclass
class McsConfig:
    levels: list                 # ascending criticality levels
    servers: list                # ServerSpec with .criticality and .core
    core: CoreModel
    p_static: float
    p_dynamic: float
    theta_max_abs: float
    ambient: float               # ambient the idle servers are designed for
    lam: float = 1.0             # in-phase amplification from neighbouring cores
    grid: float = 1e-3           # idle utilization sweep step
    max_idle_period: float = 10.0
    n_cores: int | None = None

    def __post_init__(self):
        if list(self.levels) != sorted(set(self.levels)):
            raise ValueError("levels must be strictly ascending")
        if not self.levels:
            raise ValueError("need at least one level")
        if self.lam < 1.0:
            raise ValueError("lam must be >= 1")
        if not 0.0 < self.grid < 1.0:
            raise ValueError("grid must be in (0, 1)")
        if self.n_cores is None:
            self.n_cores = max((s.core for s in self.servers), default=0) + 1

    @property
    def theta_max(self):
        return self.theta_max_abs - self.ambient

    def with_ambient(self, ambient):
        return McsConfig(self.levels, self.servers, self.core, self.p_static, self.p_dynamic,
                         self.theta_max_abs, ambient, self.lam, self.grid,
                         self.max_idle_period, self.n_cores)


@dataclass(frozen=True)
class ModeState:
    kind: str                    # "M", "S" or "SHUTDOWN"
    level: int                   # index into the level list
    entered_at: float
    pending_resume_at: float | None = None


@dataclass
class McsPlan:
    """Per-level idle servers, critical ambients and downward shift times."""

    config: McsConfig
    idle: list
    critical: list
    shift: list = field(default_factory=list)    # shift[i]: level i+1 -> i


def eligible(cfg, level):
    return [s for s in cfg.servers if s.criticality >= level]


def level_utilization(cfg, level):
    per_core = np.zeros(cfg.n_cores)
    for s in eligible(cfg, level):
        per_core[s.core] += s.budget / s.period
    return float(per_core.max()) if len(per_core) else 0.0


def _back_to_back_peak(busy_util, period, cfg):
    # two burns across a period boundary followed by two rests: a square wave of period 2T
    return cfg.lam * _peak_rise(busy_util, 2.0 * period, cfg.core, cfg.p_static, cfg.p_dynamic)


def idle_server_period(u_idle, cfg, theta_max=None):
    """Longest idle period whose complement pattern stays within ``theta_max``.

    The complement burns 1 - u_idle of every period, placed back to back
    across period boundaries.  The peak grows with the period, so the bound
    is found by root finding.
    """
    if not 0.0 < u_idle < 1.0:
        raise ValueError("u_idle must be in (0, 1)")
    theta_max = cfg.theta_max if theta_max is None else theta_max
    busy = 1.0 - u_idle
    floor = cfg.lam * cfg.core.steady(cfg.p_static + busy * cfg.p_dynamic)
    if floor >= theta_max:
        raise InfeasibleIdle(f"u_idle={u_idle:.4g} cannot keep the core below the bound")
    gap = lambda T: _back_to_back_peak(busy, T, cfg) - theta_max
    hi = cfg.max_idle_period
    if gap(hi) <= 0.0:
        return hi
    if gap(1e-12) >= 0.0:   # rounding right at the floor
        raise InfeasibleIdle(f"u_idle={u_idle:.4g} leaves no room above the steady floor")
    return brentq(gap, 1e-12, hi, xtol=1e-12, rtol=1e-12)


def idle_server_response(cfg, level, idle, core):
    """Worst-case response of the lowest-priority idle server on ``core``; inf if it diverges."""
    demand = [(s.budget * US, s.period * US) for s in eligible(cfg, level) if s.core == core]
    if sum(c / t for c, t in demand) + idle.util >= 1.0:
        return math.inf
    own = idle.util * idle.period
    r = own
    while True:
        nxt = own + sum(math.ceil(r / t - 1e-12) * c for c, t in demand)
        if nxt <= r + 1e-15:
            return nxt
        r = nxt
        if r > 1e6 * idle.period:
            return math.inf


def idle_schedulable(cfg, level, idle):
    return all(idle_server_response(cfg, level, idle, c) <= idle.period * (1 + 1e-12)
               for c in range(cfg.n_cores))


def _idle_grid(cfg, level):
    top = 1.0 - level_utilization(cfg, level)
    n = int(math.floor(top / cfg.grid + 1e-9))
    return [k * cfg.grid for k in range(n, 0, -1) if k * cfg.grid < 1.0]


def search_idle_server(cfg, level):
    """Largest idle utilization on the grid whose period bound is schedulable."""
    for u in _idle_grid(cfg, level):
        try:
            period = idle_server_period(u, cfg)
        except InfeasibleIdle:
            break   # smaller idle shares only heat more
        spec = IdleServerSpec(u, period, level)
        if idle_schedulable(cfg, level, spec):
            return spec
    raise Infeasible(f"no idle server for level {level}")


def _core_demand(cfg, level, core):
    return [(s.budget * US, s.period * US) for s in eligible(cfg, level) if s.core == core]


def _min_idle_period(cfg, level, u):
    """Smallest idle period at which an idle share ``u`` is schedulable on every core.

    On one core a period T works iff some t <= T has u*T + W(t) <= t, with
    W the step demand of the level's servers.  Candidates are the left ends
    of the intervals this carves out, checked in increasing order.
    """
    cap = cfg.max_idle_period
    candidates = set()
    for c in range(cfg.n_cores):
        demand = _core_demand(cfg, level, c)
        if not demand:
            continue
        if sum(b / t for b, t in demand) >= 1.0 - u:
            return None
        steps = np.unique(np.concatenate(
            [t * np.arange(1, int(cap / t) + 2) for _, t in demand]))
        w = sum(np.ceil(steps / t - 1e-12) * cb for cb, t in demand)
        left = np.concatenate(([0.0], steps[:-1]))
        lo = np.maximum(left, w / (1.0 - u))
        candidates.update(lo[lo <= steps].tolist())
    if not candidates:
        return 0.0    # nothing else runs: any period works
    for T in sorted(candidates):
        if T > cap:
            return None
        if idle_schedulable(cfg, level, IdleServerSpec(u, T, level)):
            return T
    return None


def critical_ambient(cfg, level, tol=1e-3):
    """Highest ambient at which ``level`` still has a schedulable idle server.

    The idle period shrinks as the ambient rises, so for each idle share the
    last feasible ambient is where the period reaches its smallest
    schedulable value.  Feasibility is not monotone in between, which rules
    out plain bisection.
    """
    def ok(amb):
        try:
            search_idle_server(cfg.with_ambient(amb), level)
            return True
        except Infeasible:
            return False

    best = -math.inf
    for u in _idle_grid(cfg, level):
        ceiling = cfg.theta_max_abs - cfg.lam * cfg.core.steady(
            cfg.p_static + (1.0 - u) * cfg.p_dynamic)
        if ceiling <= best:
            break    # smaller idle shares only lower this bound
        T = _min_idle_period(cfg, level, u)
        if T is None:
            continue
        if T == 0.0:
            amb = ceiling
        else:
            amb = cfg.theta_max_abs - _back_to_back_peak(1.0 - u, T, cfg)
        best = max(best, amb)
    if best == -math.inf:
        raise Infeasible(f"level {level} is infeasible at any ambient")
    # root finding lands a hair either side of the boundary
    step = tol * 1e-3
    while not ok(best):
        best -= step
        step *= 2.0
        if step > tol:
            raise Infeasible(f"level {level}: boundary ambient does not verify")
    return best


def _level_signal(idle, cfg):
    return PeriodicPowerSignal(cfg.p_static, cfg.p_dynamic, 1.0 - idle.util, idle.period)


def level_shift_time(cfg, from_idle, to_idle):
    """Time for the chip to settle from one level's steady orbit into another's."""
    src = _level_signal(from_idle, cfg)
    dst = _level_signal(to_idle, cfg)
    core = cfg.core
    theta0 = core.steady(src.mean) + core.b * _sig_S(core.a, src, 0.0, 200)
    return shifting_time(theta0, dst, core)


def plan(cfg):
    idle, critical = [], []
    for lv in cfg.levels:
        idle.append(search_idle_server(cfg, lv))
        critical.append(critical_ambient(cfg, lv))
    shift = [level_shift_time(cfg, idle[i + 1], idle[i]) for i in range(len(idle) - 1)]
    return McsPlan(cfg, idle, critical, shift)


def _servers_below(cfg, level_index):
    lv = cfg.levels[level_index]
    return [i for i, s in enumerate(cfg.servers) if s.criticality < lv]


def _between(cfg, lo_index, hi_index):
    lo, hi = cfg.levels[lo_index], cfg.levels[hi_index]
    return [i for i, s in enumerate(cfg.servers) if lo <= s.criticality < hi]


def initial_state(plan_, ambient, now=0.0):
    state, _ = mode_step(ModeState(RUNNING, 0, now), ambient, now, plan_)
    return state


def mode_step(state, ambient, now, plan_):
    """Advance the criticality mode machine by one ambient sample.

    Returns (new state, actions).  Actions are ("terminate", server indices),
    ("resume", server indices) and ("shutdown", all server indices).
    """
    cfg, crit = plan_.config, plan_.critical
    if state.kind == SHUTDOWN:
        return state, []
    running = state.level + 1 if state.kind == SHIFTING else state.level
    if ambient > crit[running]:
        target = next((j for j in range(running + 1, len(crit)) if ambient <= crit[j]), None)
        if target is None:
            return ModeState(SHUTDOWN, len(crit) - 1, now), [
                ("shutdown", list(range(len(cfg.servers))))]
        return ModeState(RUNNING, target, now), [("terminate", _servers_below(cfg, target))]
    if state.kind == SHIFTING:
        if ambient >= crit[state.level]:
            return ModeState(RUNNING, running, now), []
        if now >= state.pending_resume_at:
            return ModeState(RUNNING, state.level, now), [
                ("resume", _between(cfg, state.level, running))]
        return state, []
    if state.level > 0 and ambient < crit[state.level - 1]:
        lower = state.level - 1
        return ModeState(SHIFTING, lower, now, now + plan_.shift[lower]), []
    return state, []


# --- randomized thermal check -------------------------------------------------

@njit(cache=True)
def _random_pattern_peak(budget, period, offset, frac_lo, a, b, p_static, p_dynamic,
                         theta0, horizon, seed):
    """Fixed-priority schedule of servers (index order = priority) with random demand.

    Every job asks for a random share in [frac_lo, 1] of its budget.  Returns
    the peak temperature of the single-node model over ``horizon``.
    """
    np.random.seed(seed)
    n = len(budget)
    nxt_rel = offset.copy()
    left = np.zeros(n)
    t = 0.0
    theta = theta0
    peak = theta0
    base = -(b / a) * p_static
    hot = -(b / a) * (p_static + p_dynamic)
    while t < horizon:
        for i in range(n):
            if nxt_rel[i] <= t + 1e-15:
                left[i] += budget[i] * (frac_lo + (1.0 - frac_lo) * np.random.random())
                nxt_rel[i] += period[i]
        run = -1
        for i in range(n):
            if left[i] > 1e-15:
                run = i
                break
        step = horizon - t
        for i in range(n):
            step = min(step, nxt_rel[i] - t)
        if run >= 0:
            step = min(step, left[run])
            left[run] -= step
            target = hot
        else:
            target = base
        theta = target + (theta - target) * math.exp(a * step)
        if theta > peak:
            peak = theta
        t += step
    return peak


def random_pattern_peak(servers, core, p_static, p_dynamic, rng, horizon, theta0=None,
                        frac_lo=0.0):
    """Peak rise of one core running ``servers`` with random phases and demands."""
    order = sorted(servers, key=lambda s: s.period)
    budget = np.array([s.budget * US for s in order])
    period = np.array([s.period * US for s in order])
    offset = rng.random(len(order)) * period
    if theta0 is None:
        theta0 = core.steady(p_static + p_dynamic * float(np.sum(budget / period)))
    return _random_pattern_peak(budget, period, offset, frac_lo, core.a, core.b,
                                p_static, p_dynamic, float(theta0), float(horizon),
                                int(rng.integers(2**31 - 1)))
