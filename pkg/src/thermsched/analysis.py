"""Response-time analysis for CPU/GPU tasks running inside thermal servers.

All times are integer microseconds so fixed points terminate exactly.
"""

from dataclasses import dataclass, field, replace
import numpy as np

from .errors import GenRetryExceeded, ItemTooLarge, MotWithPolling
from .servers import (
    GpuServerSpec, ServerSpec, apply_mot_reservation, cpu_gpu_budgets, design_budget,
    server_jitter,
)
from .thermal import ScalarThermalParams

QUEUE_POLICIES = ("priority", "fcfs_bins", "hybrid")


def ceil_div(a, b):
    return -(-a // b)


@dataclass(frozen=True)
class TaskSpec:
    c1: int
    period: int
    priority: int
    server: int = 0
    m1: int = 0
    k: int = 0
    m2: int = 0
    c2: int = 0
    uses_gpu: bool = False

    def __post_init__(self):
        if self.period <= 0:
            raise ValueError("period must be > 0")
        if min(self.c1, self.m1, self.k, self.m2, self.c2) < 0:
            raise ValueError("segment lengths must be >= 0")
        if not self.uses_gpu and (self.m1 or self.k or self.m2 or self.c2):
            raise ValueError("CPU-only task cannot have GPU or second normal segments")

    @property
    def s(self):
        return 1 if self.uses_gpu else 0

    @property
    def gpu_segment(self):
        return self.m1 + self.k + self.m2

    @property
    def wcet(self):
        if self.uses_gpu:
            return self.c1 + self.gpu_segment + self.c2
        return self.c1

    @property
    def utilization(self):
        return self.wcet / self.period


@dataclass
class Taskset:
    tasks: list
    cpu_servers: list
    gpu_server: GpuServerSpec | None = None
    queue_policy: str = "hybrid"

    def __post_init__(self):
        if self.queue_policy not in QUEUE_POLICIES:
            raise ValueError(f"unknown queue policy {self.queue_policy!r}")
        seen = set()
        for t in self.tasks:
            if not 0 <= t.server < len(self.cpu_servers):
                raise ValueError(f"task references unknown server {t.server}")
            key = (t.server, t.priority)
            if key in seen:
                raise ValueError(f"duplicate priority {t.priority} on server {t.server}")
            seen.add(key)
            if t.uses_gpu and self.gpu_server is None:
                raise ValueError("GPU-using task without a GPU server")

    def server_of(self, task):
        return self.cpu_servers[task.server]

    def gpu_tasks(self):
        return [t for t in self.tasks if t.uses_gpu]

    def same_server(self, task):
        return [t for t in self.tasks if t.server == task.server and t is not task]


@dataclass
class TaskResult:
    W: int
    B_local: int
    B_remote: int
    H: int
    schedulable: bool


@dataclass
class AnalysisReport:
    tasks: list
    taskset_schedulable: bool
    queue_used: str
    alternatives: dict = field(default_factory=dict)

    @property
    def n_schedulable(self):
        return sum(r.schedulable for r in self.tasks)


def _mot_on(server, mot_enabled):
    return server.mot_reserve > 0 if mot_enabled is None else mot_enabled


def handover_delay(task, cpu_srv, gpu_srv, mot_enabled=None):
    mot = _mot_on(cpu_srv, mot_enabled)
    if mot and cpu_srv.policy == "polling":
        raise MotWithPolling("MOT reservation is not available with a polling server")
    if not task.uses_gpu:
        return 0
    gpu_wait = gpu_srv.period - gpu_srv.budget
    if mot:
        return gpu_wait
    if cpu_srv.policy == "polling":
        return gpu_wait + 2 * cpu_srv.period
    return gpu_wait + 2 * (cpu_srv.period - cpu_srv.regular_budget)


def local_blocking(task, taskset, rm_tight=False):
    """CPU time stolen by boosted GPU data transfers of lower-priority local tasks."""
    gpu = taskset.gpu_server
    if gpu is None:
        return 0
    lower = [t for t in taskset.same_server(task) if t.uses_gpu and t.priority < task.priority]
    if not lower:
        return 0
    by_tasks = sum(t.gpu_segment - t.k for t in lower)
    by_budget = (ceil_div(task.period, gpu.period) + 1) * gpu.budget
    factor = 1 if rm_tight else task.s + 1
    return factor * min(by_budget, by_tasks)


def gpu_response(task, taskset):
    """Lock-to-release time of a GPU segment: handover delay plus the segment itself."""
    return handover_delay(task, taskset.server_of(task), taskset.gpu_server) + task.gpu_segment


def remote_blocking_priority(task, taskset):
    """GPU lock wait under a priority-ordered queue; returns a value > period on divergence."""
    if not task.uses_gpu:
        return 0
    others = [t for t in taskset.gpu_tasks() if t is not task]
    lower = [gpu_response(t, taskset) for t in others if t.priority < task.priority]
    higher = [(t.period, gpu_response(t, taskset)) for t in others if t.priority > task.priority]
    base = max(lower, default=0)
    b = base
    while True:
        nxt = base + sum((ceil_div(b, th) + 1) * wh for th, wh in higher)
        if nxt == b or nxt > task.period:
            return nxt
        b = nxt


def ffd_bins(sizes, capacity):
    """First-fit decreasing; returns bins as lists of item indices."""
    order = sorted(range(len(sizes)), key=lambda i: (-sizes[i], i))
    bins, loads = [], []
    for i in order:
        if sizes[i] > capacity:
            raise ItemTooLarge(f"item {sizes[i]} exceeds capacity {capacity}")
        for b, load in enumerate(loads):
            if load + sizes[i] <= capacity:
                bins[b].append(i)
                loads[b] += sizes[i]
                break
        else:
            bins.append([i])
            loads.append(sizes[i])
    return bins


def remote_blocking_bins(task, taskset, mot_enabled=None):
    """GPU lock wait under the FCFS queue served in first-fit-decreasing bin order."""
    if not task.uses_gpu:
        return 0
    gpu = taskset.gpu_server
    gtasks = taskset.gpu_tasks()
    n_bins = len(ffd_bins([t.gpu_segment for t in gtasks], gpu.budget))
    srv = taskset.server_of(task)
    base = (n_bins + 1) * gpu.period
    if _mot_on(srv, mot_enabled):
        if srv.policy == "polling":
            raise MotWithPolling("MOT reservation is not available with a polling server")
        return base
    if srv.policy == "polling":
        return base + 2 * (len(gtasks) - 1) * srv.period
    return base + 2 * (len(gtasks) - 1) * (srv.period - srv.regular_budget)


def response_time(task, taskset, blocking_mode="priority", higher_W=None, rm_tight=False):
    """Worst-case response time; returns (W, parts) and stops once W exceeds the period."""
    srv = taskset.server_of(task)
    gpu = taskset.gpu_server
    H = handover_delay(task, srv, gpu) if task.uses_gpu else 0
    Bl = local_blocking(task, taskset, rm_tight=rm_tight)
    if not task.uses_gpu:
        Br = 0
    elif task.gpu_segment > gpu.budget:
        Br = task.period + 1
    elif blocking_mode == "priority":
        Br = remote_blocking_priority(task, taskset)
    else:
        Br = remote_blocking_bins(task, taskset)
    parts = {"B_local": Bl, "B_remote": Br, "H": H}
    Ci = task.wcet
    Cc, Tc = srv.regular_budget, srv.period
    Jc = server_jitter(replace(srv, budget=Cc, mot_reserve=0))
    higher_W = higher_W or {}
    higher = [(h.wcet, h.period, higher_W.get(id(h), h.wcet))
              for h in taskset.same_server(task) if h.priority > task.priority]
    s = task.s
    fixed = Ci + Bl + Br + H
    W = Ci
    while True:
        nxt = fixed + max(0, ceil_div(W + Cc - s * (H + task.k), Tc)) * (Tc - Cc)
        for Ch, Th, Wh in higher:
            nxt += max(0, ceil_div(W + Jc + (Wh - Ch) - s * (H + task.gpu_segment), Th)) * Ch
        if nxt == W or nxt > task.period:
            return nxt, parts
        W = nxt


def hsf_response_time(wcet, period, server, higher=(), carry_in=False):
    """Hierarchical fixed-priority response time inside one periodic server.

    ``higher`` holds (wcet, period[, response]) of higher-priority tasks of
    the same server.  ``carry_in`` adds the response-minus-wcet jitter of each
    higher-priority task.
    """
    Cc, Tc = server.budget, server.period
    J = server_jitter(server)
    hp = []
    for h in higher:
        ch, th = h[0], h[1]
        wh = h[2] if len(h) > 2 else ch
        hp.append((ch, th, (wh - ch) if carry_in else 0))
    W = wcet
    while True:
        nxt = wcet + ceil_div(W + Cc, Tc) * (Tc - Cc)
        for ch, th, extra in hp:
            nxt += ceil_div(W + J + extra, th) * ch
        if nxt == W or nxt > period:
            return nxt
        W = nxt


def _analyze(taskset, mode, rm_tight):
    results = {}
    Ws = {}
    for srv_idx in range(len(taskset.cpu_servers)):
        local = sorted((t for t in taskset.tasks if t.server == srv_idx),
                       key=lambda t: -t.priority)
        for t in local:
            W, parts = response_time(t, taskset, mode, Ws, rm_tight=rm_tight)
            Ws[id(t)] = W
            results[id(t)] = TaskResult(W=W, schedulable=W <= t.period, **parts)
    return [results[id(t)] for t in taskset.tasks]


def analyze_taskset(taskset, rm_tight=False):
    """Run the analysis for the configured queue; ``hybrid`` picks the better queue."""
    modes = ["priority", "fcfs_bins"] if taskset.queue_policy == "hybrid" else [taskset.queue_policy]
    alternatives = {}
    best = None
    for mode in modes:
        try:
            res = _analyze(taskset, mode, rm_tight)
        except ItemTooLarge:
            continue
        report = AnalysisReport(res, all(r.schedulable for r in res), mode)
        alternatives[mode] = report
        if report.taskset_schedulable:
            best = report
            break
        if best is None or report.n_schedulable > best.n_schedulable:
            best = report
    if best is None:  # every mode failed structurally: nothing is schedulable
        res = [TaskResult(t.period + 1, 0, 0, 0, False) for t in taskset.tasks]
        best = AnalysisReport(res, False, modes[0])
    best.alternatives = alternatives
    return best


def wfd_partition(utils, n_cores):
    """Worst-fit decreasing; returns the core index of each item."""
    loads = [0.0] * n_cores
    assign = [0] * len(utils)
    for i in sorted(range(len(utils)), key=lambda i: (-utils[i], i)):
        core = min(range(n_cores), key=lambda c: (loads[c], c))
        assign[i] = core
        loads[core] += utils[i]
    return assign


# ---- taskset generation -------------------------------------------------------

# Illustrative platform used when budgets are not given explicitly.  The
# constants are not measurements; they only make the generated servers
# plausible (CPU server near 45% utilization, GPU server near 60%).
ILLUSTRATIVE_CPU = ScalarThermalParams(alpha=110.0, beta=-0.05)
ILLUSTRATIVE_GPU = ScalarThermalParams(alpha=70.0, beta=-0.08)
ILLUSTRATIVE_THETA_MAX = (52.0, 45.0)
ILLUSTRATIVE_CROSS = 0.05


@dataclass(frozen=True)
class GenParams:
    n_cores: int = 4
    n_tasks: tuple = (8, 20)
    utilization: tuple = (0.4, 1.6)
    period_ms: tuple = (30.0, 500.0)
    gpu_fraction: tuple = (0.10, 0.30)
    gpu_ratio: tuple = (2.0, 3.0)
    misc_ratio: tuple = (0.10, 0.20)
    cpu_server_period_ms: float = 10.0
    gpu_server_period_ms: float = 20.0
    policy: str = "sporadic"
    mot: bool = False
    cpu_budget_ms: float | None = None
    gpu_budget_ms: float | None = None
    queue_policy: str = "hybrid"
    seed: int = 0

    def __post_init__(self):
        for name in ("n_tasks", "utilization", "period_ms", "gpu_fraction", "gpu_ratio",
                     "misc_ratio"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"empty range for {name}")
        if self.mot and self.policy == "polling":
            raise MotWithPolling("MOT reservation is not available with a polling server")


def default_budgets_ms(gp):
    """(cpu budget, gpu budget) in ms from the illustrative thermal platform."""
    theta_c, theta_g = ILLUSTRATIVE_THETA_MAX
    tc, tg = gp.cpu_server_period_ms / 1e3, gp.gpu_server_period_ms / 1e3
    c_cpu, c_gpu = cpu_gpu_budgets(theta_c, theta_g, tc, tg, ILLUSTRATIVE_CPU, ILLUSTRATIVE_GPU,
                                   ILLUSTRATIVE_CROSS)
    if gp.policy == "deferrable":
        # rescale by the deferrable/polling ratio at the same own-peak target
        ratio = (design_budget("deferrable", theta_c, tc, ILLUSTRATIVE_CPU)
                 / design_budget("polling", theta_c, tc, ILLUSTRATIVE_CPU))
        c_cpu *= ratio
    return c_cpu * 1e3, c_gpu * 1e3


def to_us(ms):
    return int(round(ms * 1000))


def _uunifast_discard(rng, n, total, cap, attempts):
    for _ in range(attempts):
        utils = []
        remaining = total
        for i in range(1, n):
            nxt = remaining * rng.random() ** (1.0 / (n - i))
            utils.append(remaining - nxt)
            remaining = nxt
        utils.append(remaining)
        if max(utils) <= cap:
            return utils
    raise GenRetryExceeded("could not split utilization under the server cap")


def generate_taskset(gp, rng=None):
    """Random taskset following the base generation procedure.

    ``rng`` overrides the seed in ``gp`` (useful for drawing many sets from one stream).
    """
    rng = np.random.default_rng(gp.seed) if rng is None else rng
    cpu_ms, gpu_ms = gp.cpu_budget_ms, gp.gpu_budget_ms
    if cpu_ms is None or gpu_ms is None:
        cb, gb = default_budgets_ms(gp)
        cpu_ms = cb if cpu_ms is None else cpu_ms
        gpu_ms = gb if gpu_ms is None else gpu_ms
    # truncate so the integer budget never exceeds the designed one
    cpu_budget, gpu_budget = int(cpu_ms * 1000), int(gpu_ms * 1000)
    cpu_period, gpu_period = to_us(gp.cpu_server_period_ms), to_us(gp.gpu_server_period_ms)
    server_util = cpu_budget / cpu_period
    attempts = 10_000

    n = int(rng.integers(gp.n_tasks[0], gp.n_tasks[1] + 1))
    total = rng.uniform(*gp.utilization)
    utils = _uunifast_discard(rng, n, total, server_util, attempts)
    n_gpu = int(round(n * rng.uniform(*gp.gpu_fraction)))
    gpu_idx = set(rng.choice(n, size=n_gpu, replace=False).tolist())

    raw = []
    for i, u in enumerate(utils):
        tries = 0
        while True:
            period = to_us(rng.uniform(*gp.period_ms))
            wcet = max(1, int(round(u * period)))
            if i not in gpu_idx:
                raw.append(dict(c1=wcet, period=period, uses_gpu=False))
                break
            e = 0
            for _ in range(10):   # a few ratios per period, then draw a new period
                tries += 1
                r = rng.uniform(*gp.gpu_ratio)
                e = int(round(wcet * r / (1.0 + r)))
                if 0 < e <= gpu_budget:
                    break
            if tries >= attempts:
                raise GenRetryExceeded("could not fit a GPU segment in the GPU budget")
            if not 0 < e <= gpu_budget:
                continue
            normal = wcet - e
            c1 = int(round(normal * rng.random()))
            misc = int(round(e * rng.uniform(*gp.misc_ratio)))
            m1 = int(round(misc * rng.random()))
            raw.append(dict(c1=c1, c2=normal - c1, m1=m1, m2=misc - m1, k=e - misc,
                            period=period, uses_gpu=True))
            break

    cores = wfd_partition(utils, gp.n_cores)
    # rate-monotonic priorities: shorter period -> larger number
    order = sorted(range(n), key=lambda i: (raw[i]["period"], i), reverse=True)
    prio = {i: rank for rank, i in enumerate(order)}
    tasks = [TaskSpec(priority=prio[i], server=cores[i], **raw[i]) for i in range(n)]

    mot = 0
    if gp.mot:
        _, mot = apply_mot_reservation(cpu_budget, tasks, gp.policy)
    servers = [ServerSpec(budget=cpu_budget, period=cpu_period, policy=gp.policy, core=c,
                          mot_reserve=mot) for c in range(gp.n_cores)]
    gpu = GpuServerSpec(budget=gpu_budget, period=gpu_period)
    return Taskset(tasks=tasks, cpu_servers=servers, gpu_server=gpu, queue_policy=gp.queue_policy)
