"""Discrete-event co-simulation of thermal servers, tasks and the shared GPU.

The scheduler runs in a compiled kernel on integer microseconds.  Temperature
is evaluated afterwards from the busy intervals with the exact closed form for
piecewise-constant power, so it is exact between events.
"""

from dataclasses import dataclass, field
import math

import numpy as np

from . import _simcore as K
from .analysis import analyze_taskset, ffd_bins
from .errors import ConfigError
from .mcs import initial_state, mode_step
from .thermal import CoreModel, MatrixThermalParams, evolve_segments

POLICY_CODE = {"polling": K.POLLING, "deferrable": K.DEFERRABLE, "sporadic": K.SPORADIC}
EVENT_NAMES = {
    K.EV_RELEASE: "release", K.EV_COMPLETE: "complete", K.EV_RUN: "run", K.EV_STOP: "stop",
    K.EV_REPLENISH: "replenish", K.EV_DEPLETE: "deplete", K.EV_LOCK: "lock",
    K.EV_UNLOCK: "unlock", K.EV_GPU_ON: "gpu_on", K.EV_GPU_OFF: "gpu_off",
    K.EV_MODE: "mode", K.EV_MISS: "deadline_miss",
}


@dataclass
class PowerModel:
    """Per-node power: ``static`` always, plus ``dynamic`` while the node executes."""

    static: float = 0.0
    dynamic: float = 1.0
    gpu_static: float = 0.0
    gpu_dynamic: float = 1.0


@dataclass
class SimConfig:
    taskset: object
    duration: float                       # seconds
    thermal: object = None                # MatrixThermalParams, CoreModel or None
    power: PowerModel = field(default_factory=PowerModel)
    theta_max: float = math.inf           # deg C rise
    release_pattern: object = "synchronous"   # "synchronous" | ("random", seed) | offsets in us
    queue_policy: str | None = None       # defaults to the taskset's (hybrid -> analysis choice)
    max_jobs: int | None = None
    mode_events: list = field(default_factory=list)   # (time s, server index, active)
    ambient_scenario: list = None         # (time s, ambient deg C) samples, needs mcs_plan
    mcs_plan: object = None
    theta0: object = None
    record: bool = True
    grid_step: float | None = None        # seconds between uniform temperature samples


@dataclass
class SimTrace:
    events: np.ndarray            # rows of (t_us, kind, a, b)
    max_response: np.ndarray      # per task, us
    misses: np.ndarray
    completed: np.ndarray
    released: np.ndarray
    consumed: np.ndarray          # per server, us
    end_time: int                 # us
    overflow: bool
    n_cores: int
    queue_policy: str
    busy: list = None             # per node list of (start_us, end_us)
    temps: np.ndarray = None      # (times_s, temps) at event boundaries and grid points
    times: np.ndarray = None
    seg_peak: np.ndarray = None
    seg_peak_t: np.ndarray = None
    violations: list = field(default_factory=list)
    config: SimConfig = None

    def event_rows(self):
        for t, kind, a, b in self.events:
            yield int(t), EVENT_NAMES[int(kind)], int(a), int(b)


def _server_priorities(servers):
    order = sorted(range(len(servers)), key=lambda s: (servers[s].period, s))
    prio = np.empty(len(servers), dtype=np.int64)
    for rank, s in enumerate(order):
        prio[s] = len(servers) - rank
    return prio


def _offsets(pattern, tasks):
    if pattern == "synchronous":
        return np.zeros(len(tasks), dtype=np.int64)
    if isinstance(pattern, tuple) and pattern and pattern[0] == "random":
        rng = np.random.default_rng(pattern[1])
        return np.array([rng.integers(0, t.period) for t in tasks], dtype=np.int64)
    offs = np.asarray(pattern, dtype=np.int64)
    if offs.shape != (len(tasks),) or np.any(offs < 0):
        raise ConfigError("scripted release offsets need one non-negative value per task")
    return offs


def _resolve_queue(cfg):
    ts = cfg.taskset
    q = cfg.queue_policy or ts.queue_policy
    if q == "hybrid":
        q = analyze_taskset(ts).queue_used
    if q not in ("priority", "fcfs_bins"):
        raise ConfigError(f"unknown queue policy {q!r}")
    return q


def mode_events_from_ambient(plan, samples):
    """Server on/off events and the mode log produced by feeding samples to the mode machine."""
    if not samples:
        return [], []
    t0, amb0 = samples[0]
    state = initial_state(plan, amb0, t0)
    log = [(t0, state.kind, state.level, [])]
    events = [(t0, i, False) for i in range(len(plan.config.servers))
              if plan.config.servers[i].criticality < plan.config.levels[state.level]]
    for t, amb in samples[1:]:
        state, actions = mode_step(state, amb, t, plan)
        log.append((t, state.kind, state.level, actions))
        for kind, servers in actions:
            events.extend((t, i, kind == "resume") for i in servers)
    return events, log


def simulate(cfg):
    ts = cfg.taskset
    tasks, servers = ts.tasks, ts.cpu_servers
    if not servers:
        raise ConfigError("no CPU servers")
    for t in tasks:
        if not 0 <= t.server < len(servers):
            raise ConfigError(f"task references unknown server {t.server}")
    n_cores = max(s.core for s in servers) + 1
    queue = _resolve_queue(cfg)

    gtasks = [i for i, t in enumerate(tasks) if t.uses_gpu]
    bin_rank = np.zeros(len(tasks), dtype=np.int64)
    if gtasks and ts.gpu_server is not None:
        sizes = [tasks[i].gpu_segment for i in gtasks]
        if max(sizes) <= ts.gpu_server.budget:
            rank = 0
            for b in ffd_bins(sizes, ts.gpu_server.budget):
                for j in b:
                    bin_rank[gtasks[j]] = rank
                    rank += 1
    g_budget = ts.gpu_server.budget if ts.gpu_server else 1
    g_period = ts.gpu_server.period if ts.gpu_server else 1

    mode = list(cfg.mode_events)
    if cfg.ambient_scenario is not None:
        if cfg.mcs_plan is None:
            raise ConfigError("an ambient scenario needs an MCS plan")
        mode += mode_events_from_ambient(cfg.mcs_plan, cfg.ambient_scenario)[0]
    mode = sorted(mode, key=lambda e: e[0])
    for _, s, _ in mode:
        if not 0 <= s < len(servers):
            raise ConfigError(f"mode event references unknown server {s}")
    horizon = int(round(cfg.duration * 1e6))
    if horizon <= 0:
        raise ConfigError("duration must be > 0")
    max_jobs = cfg.max_jobs if cfg.max_jobs is not None else np.iinfo(np.int64).max // 4

    arr = lambda xs: np.asarray(xs, dtype=np.int64)
    args = (
        arr([t.c1 for t in tasks]), arr([t.m1 for t in tasks]), arr([t.k for t in tasks]),
        arr([t.m2 for t in tasks]), arr([t.c2 for t in tasks]), arr([t.period for t in tasks]),
        _offsets(cfg.release_pattern, tasks), np.array([t.uses_gpu for t in tasks], dtype=np.bool_),
        arr([t.priority for t in tasks]), arr([t.server for t in tasks]), bin_rank,
        arr([s.regular_budget for s in servers]), arr([s.mot_reserve for s in servers]),
        arr([s.period for s in servers]), arr([POLICY_CODE[s.policy] for s in servers]),
        arr([s.core for s in servers]), _server_priorities(servers), n_cores,
        g_budget, g_period, queue == "fcfs_bins",
        arr([int(round(t * 1e6)) for t, _, _ in mode]), arr([s for _, s, _ in mode]),
        arr([1 if a else 0 for _, _, a in mode]),
        max_jobs, horizon,
    )
    need_events = cfg.record or cfg.thermal is not None
    cap = 1 << 16
    while True:
        out = K.simulate_kernel(*args, need_events, cap)
        max_resp, misses, done, nrel, consumed, events, overflow, end = out
        if not (need_events and overflow):
            break
        cap *= 4
    trace = SimTrace(events=events, max_response=max_resp, misses=misses, completed=done,
                     released=nrel, consumed=consumed, end_time=int(end), overflow=bool(overflow),
                     n_cores=n_cores, queue_policy=queue, config=cfg)
    if cfg.thermal is not None:
        _thermal_pass(trace, cfg)
    return trace


def busy_intervals(trace, gpu=False):
    """Per-core (and optionally GPU) execution intervals in microseconds."""
    nodes = [[] for _ in range(trace.n_cores + (1 if gpu else 0))]
    start = [None] * len(nodes)
    for t, kind, a, _ in trace.events:
        if kind == K.EV_RUN and start[a] is None:
            start[a] = t
        elif kind == K.EV_STOP and start[a] is not None:
            nodes[a].append((int(start[a]), int(t)))
            start[a] = None
        elif gpu and kind == K.EV_GPU_ON:
            start[-1] = t
        elif gpu and kind == K.EV_GPU_OFF and start[-1] is not None:
            nodes[-1].append((int(start[-1]), int(t)))
            start[-1] = None
    for i, s in enumerate(start):
        if s is not None and trace.end_time > s:
            nodes[i].append((int(s), trace.end_time))
    return nodes


def _thermal_pass(trace, cfg):
    mp = cfg.thermal
    if isinstance(mp, CoreModel):
        # one uncoupled copy per core
        eye = np.eye(trace.n_cores)
        mp = MatrixThermalParams.from_matrices(mp.a * eye, mp.b * eye)
    n_nodes = mp.n
    with_gpu = n_nodes == trace.n_cores + 1
    if n_nodes not in (trace.n_cores, trace.n_cores + 1):
        raise ConfigError(f"thermal model has {n_nodes} nodes for {trace.n_cores} cores")
    busy = busy_intervals(trace, gpu=with_gpu)
    trace.busy = busy
    marks = {0, trace.end_time}
    for node in busy:
        for a, b in node:
            marks.add(a)
            marks.add(b)
    if cfg.grid_step:
        step = int(round(cfg.grid_step * 1e6))
        marks.update(range(0, trace.end_time + 1, step))
    times = np.array(sorted(m for m in marks if 0 <= m <= trace.end_time), dtype=np.int64)
    on = np.zeros((len(times), n_nodes))
    for i, node in enumerate(busy):
        for a, b in node:
            lo, hi = np.searchsorted(times, [a, b])
            on[lo:hi, i] = 1.0
    pw = cfg.power
    static = np.full(n_nodes, pw.static)
    dyn = np.full(n_nodes, pw.dynamic)
    if with_gpu:
        static[-1], dyn[-1] = pw.gpu_static, pw.gpu_dynamic
    powers = static + on[:-1] * dyn
    durations = np.diff(times) / 1e6
    theta0 = np.zeros(n_nodes) if cfg.theta0 is None else np.asarray(cfg.theta0, dtype=float)
    temps, seg_peak, seg_t = evolve_segments(theta0, durations, powers, mp)
    offset = mp.chip_offset
    trace.times = times / 1e6
    trace.temps = temps + offset
    trace.seg_peak = seg_peak + offset
    trace.seg_peak_t = seg_t
    trace.violations = verify_thermal(trace, cfg.theta_max)


def verify_thermal(trace, theta_max):
    """(t, node, temperature) for every segment whose exact peak exceeds ``theta_max``."""
    if trace.seg_peak is None or not np.isfinite(theta_max):
        return []
    out = []
    ks, nodes = np.nonzero(trace.seg_peak > theta_max)
    for k, i in zip(ks, nodes):
        out.append((float(trace.times[k] + trace.seg_peak_t[k, i]), int(i),
                    float(trace.seg_peak[k, i])))
    return out


def collect_metrics(trace):
    ts = trace.config.taskset
    tasks = [
        {"task": i, "jobs": int(trace.completed[i]), "max_response_us": int(trace.max_response[i]),
         "deadline_misses": int(trace.misses[i])}
        for i in range(len(ts.tasks)) if trace.released[i] > 0
    ]
    servers = []
    for s, srv in enumerate(ts.cpu_servers):
        periods = max(trace.end_time / srv.period, 1e-12)
        servers.append({"server": s, "budget_utilization": float(trace.consumed[s]) / (srv.budget * periods)})
    thermal = {}
    if trace.temps is not None:
        peak = np.max(np.vstack([trace.temps, trace.seg_peak]), axis=0)
        thermal = {"peak": [float(x) for x in peak], "violations": len(trace.violations)}
    return {"tasks": tasks, "servers": servers, "thermal": thermal}
