"""Acceptance suite: one test per criterion, each printed as PASS/FAIL in the summary."""

import math
import time
from dataclasses import replace

import numpy as np
import pytest

from thermsched.analysis import GenParams, analyze_taskset, generate_taskset
from thermsched.errors import Infeasible
from thermsched.estimation import (
    REFERENCE_A_TILDE, EstimationResult, SteadyProfile, Template, TransientTrace,
    build_Y_onehot, detect_anomaly, estimate, estimate_floorplan, mask_vector,
    predict_temperature,
)
from thermsched.mcs import (
    McsConfig, McsPlan, eligible, initial_state, mode_step, plan, random_pattern_peak,
    search_idle_server,
)
from thermsched.servers import (
    ServerSpec, design_budget, max_server_utilization, polling_budget_single,
    worst_case_pattern,
)
from thermsched.simulator import SimConfig, simulate
from thermsched.thermal import (
    CoreModel, MatrixThermalParams, PeriodicPowerSignal, ScalarThermalParams, evolve_piecewise,
    evolve_segments, ode_oracle, temp_multicore, temp_transient_single,
)

criterion = pytest.mark.criterion


# ---- shared oracles --------------------------------------------------------------

def random_coupled_A(rng, n, coupling=(0.0, 0.3), leak=(0.05, 0.5)):
    """Stable symmetric conduction matrix: negative diagonal, non-negative coupling."""
    g = np.triu(rng.uniform(*coupling, (n, n)), 1)
    g = g + g.T
    return -np.diag(g.sum(axis=1) + rng.uniform(*leak, n)) + g


def switch_times(sigs, t0, t):
    cuts = {t0, t}
    for s in sigs:
        for edge in (s.offset, s.offset + s.util * s.period):
            k = math.floor((t0 - edge) / s.period)
            x = edge + k * s.period
            while x < t:
                if x > t0:
                    cuts.add(x)
                x += s.period
    return sorted(cuts)


def rk4_piecewise(theta0, t0, t, model, sigs, steps_per_period=200):
    """RK4 restarted at every power switch so each stretch integrates smooth dynamics."""
    h = min(s.period for s in sigs) / steps_per_period
    cuts = switch_times(sigs, t0, t)
    y = np.atleast_1d(np.asarray(theta0, dtype=float))
    for a, b in zip(cuts[:-1], cuts[1:]):
        if b - a <= 0:
            continue
        mid = 0.5 * (a + b)
        p = np.array([float(s.power(mid)) for s in sigs])
        y = ode_oracle(y, a, b, model, lambda _s, p=p: p, h)
    return y


def cold_start_peak(alpha, beta, burn, rest):
    """Limit of the end-of-burn temperature of burn/rest cycles started at zero.

    One cycle is the affine map x -> k x + c built from the two exponential
    segments; composing it with itself 2^64 times reaches the periodic orbit.
    """
    e_b, e_r = math.exp(beta * burn), math.exp(beta * rest)
    k, c = e_b * e_r, alpha * (1.0 - e_b) * e_r
    start = 0.0
    kk, cc = k, c
    for _ in range(64):
        start = kk * start + cc
        kk, cc = kk * kk, kk * cc + cc
    return e_b * start + alpha * (1.0 - e_b)


def periodic_orbit_peak(mp, period, util, amp, base, phases):
    """Chip peak of the periodic steady state under one shifted square wave per node."""
    n = mp.n
    cuts = {0.0, period}
    for ph in phases:
        cuts.update({ph % period, (ph + util * period) % period})
    cuts = sorted(cuts)
    durs = np.diff(cuts)
    mids = np.array(cuts[:-1]) + durs / 2
    powers = [[base + amp * (((m - ph) % period) < util * period) for ph in phases] for m in mids]
    temps, _, _ = evolve_segments(np.zeros(n), durs, powers, mp)
    start = np.linalg.solve(np.eye(n) - mp.expm(period), temps[-1])
    _, peak, _ = evolve_piecewise(start, durs, powers, mp)
    return float(peak.max())


# ---- 1: closed form vs RK4 ---------------------------------------------------------

@criterion(1, "closed-form transient vs RK4 oracle within 0.05 C, 200 draws, < 60 s")
def test_closed_form_matches_rk4(record):
    rng = np.random.default_rng(101)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(200):
        n = int(rng.integers(1, 5))
        sigs = [PeriodicPowerSignal(rng.uniform(0, 1), rng.uniform(0.5, 3), rng.uniform(0.05, 0.95),
                                    rng.uniform(0.2, 4), 0.0) for _ in range(n)]
        sigs = [replace(s, offset=rng.uniform(0, s.period)) for s in sigs]
        th0 = rng.uniform(0, 40, n)
        t0 = rng.uniform(0, 5)
        t = t0 + rng.uniform(0.5, 10)
        if n == 1:
            core = CoreModel(rng.uniform(-1, -0.05), rng.uniform(0.5, 3))
            cf = np.array([temp_transient_single(th0[0], t0, t, core, sigs[0], terms=200)])
            model = core
        else:
            model = MatrixThermalParams.from_matrices(random_coupled_A(rng, n),
                                                      rng.uniform(0.5, 3, n))
            cf = temp_multicore(th0, t0, t, model, sigs, terms=200)
        ref = rk4_piecewise(th0, t0, t, model, sigs)
        worst = max(worst, float(np.max(np.abs(cf - ref))))
    elapsed = time.perf_counter() - start
    record(f"max |err| {worst:.4f} C in {elapsed:.1f} s")
    assert worst <= 0.05
    assert elapsed < 60


# ---- 2: budget thermal safety and tightness ----------------------------------------

@criterion(2, "worst-case pattern stays below theta_M + 0.05; 10% larger budget violates in >= 95")
def test_budget_safety_and_tightness(record):
    rng = np.random.default_rng(202)
    policies = ["polling", "sporadic", "deferrable"]
    worst_excess, violations = -math.inf, 0
    for k in range(100):
        alpha = rng.uniform(40, 150)
        beta = -rng.uniform(0.005, 0.5)
        lam = rng.uniform(1.0, 1.5)
        period = rng.uniform(1e-3, 1.0) / abs(beta)
        theta = rng.uniform(0.2, 0.8) * lam * alpha
        policy = policies[k % 3]
        p = ScalarThermalParams(alpha=alpha, beta=beta, lam=lam)
        c = design_budget(policy, theta, period, p)

        def peak(budget):
            (burn, rest), _ = worst_case_pattern(policy, budget, period)
            return lam * cold_start_peak(alpha, beta, burn, rest)

        worst_excess = max(worst_excess, peak(c) - theta)
        bigger = 1.1 * c
        if bigger < period and peak(bigger) > theta:
            violations += 1
    record(f"max excess {worst_excess:+.2e} C; inflated budget violates in {violations}/100")
    assert worst_excess <= 0.05
    assert violations >= 95


# ---- 3: utilization limit ------------------------------------------------------------

@criterion(3, "C/T at T = 1e-4/|beta| matches theta_M/alpha within 1e-3")
def test_utilization_limit(record):
    rng = np.random.default_rng(303)
    worst = 0.0
    for _ in range(100):
        alpha = rng.uniform(20, 200)
        beta = -rng.uniform(0.001, 1.0)
        theta = rng.uniform(0.05, 0.95) * alpha
        p = ScalarThermalParams(alpha=alpha, beta=beta)
        T = 1e-4 / abs(beta)
        util = polling_budget_single(theta, T, p) / T
        worst = max(worst, abs(util - theta / alpha))
        assert max_server_utilization(theta, p) == pytest.approx(theta / alpha)
    record(f"max |C/T - theta_M/alpha| {worst:.2e}")
    assert worst <= 1e-3


# ---- 4: in-phase dominance ---------------------------------------------------------------

@criterion(4, "in-phase steady peak >= 20 random phase-shifted variants on 50 instances")
def test_in_phase_dominance(record):
    # every core runs the same square wave; only the phases differ between variants
    rng = np.random.default_rng(404)
    beaten, worst = 0, 0.0
    for _ in range(50):
        n = int(rng.integers(2, 5))
        mp = MatrixThermalParams.from_matrices(random_coupled_A(rng, n) * rng.uniform(0.1, 2),
                                               rng.uniform(0.5, 3))
        period, util = rng.uniform(0.2, 10), rng.uniform(0.1, 0.9)
        amp, base = rng.uniform(0.5, 3), rng.uniform(0, 0.5)
        in_phase = periodic_orbit_peak(mp, period, util, amp, base, np.zeros(n))
        shifted = [periodic_orbit_peak(mp, period, util, amp, base, rng.uniform(0, period, n))
                   for _ in range(20)]
        gap = max(shifted) - in_phase
        if gap > 1e-9:
            beaten += 1
            worst = max(worst, gap)
    record(f"{beaten}/50 instances have a hotter shifted variant (by up to {worst:.3f} C)")
    assert beaten == 0


# ---- 5: analysis soundness ------------------------------------------------------------------

@criterion(5, "schedulable tasks meet all deadlines over 1e5-job simulations of 500 tasksets")
def test_analysis_soundness(record):
    start = time.perf_counter()
    counterexamples, checked = [], 0
    for seed in range(500):
        ts = generate_taskset(GenParams(seed=seed))
        rep = analyze_taskset(ts)
        rate = sum(1e6 / t.period for t in ts.tasks)
        cfg = SimConfig(ts, duration=1.05 * 100_000 / rate, queue_policy=rep.queue_used,
                        max_jobs=100_000, record=False)
        tr = simulate(cfg)
        assert tr.released.sum() == 100_000 and not tr.overflow
        for i, r in enumerate(rep.tasks):
            if r.schedulable:
                checked += 1
                if tr.misses[i] or tr.max_response[i] > r.W:
                    counterexamples.append((seed, i))
    elapsed = time.perf_counter() - start
    record(f"{len(counterexamples)} counterexamples over {checked} schedulable tasks "
           f"in {elapsed:.0f} s")
    assert counterexamples == []
    assert elapsed < 600


# ---- 6: queue enhancement -------------------------------------------------------------------------

@criterion(6, "fcfs_bins strictly reduces B_remote of the failing low-priority GPU tasks")
def test_bins_reduce_remote_blocking(record):
    qualifying, reduced = 0, 0
    for seed in range(1500):
        ts = generate_taskset(GenParams(seed=seed))
        pr = analyze_taskset(replace(ts, queue_policy="priority"))
        failing = {i for i, r in enumerate(pr.tasks) if not r.schedulable}
        gpu = sorted((i for i, t in enumerate(ts.tasks) if t.uses_gpu),
                     key=lambda i: ts.tasks[i].priority)
        # failures confined to a proper lowest-priority slice of the GPU tasks
        if not failing or len(failing) >= len(gpu) or failing != set(gpu[:len(failing)]):
            continue
        qualifying += 1
        bins = analyze_taskset(replace(ts, queue_policy="fcfs_bins"))
        if all(bins.tasks[i].B_remote < pr.tasks[i].B_remote for i in failing):
            reduced += 1
    record(f"strict reduction in {reduced}/{qualifying} qualifying tasksets")
    assert qualifying > 0
    assert reduced == qualifying


# ---- 7: mixed-criticality safety --------------------------------------------------------------------

def random_mcs_config(rng):
    n_cores = int(rng.integers(1, 4))
    servers = []
    for _ in range(int(rng.integers(2, 7))):
        period = int(rng.choice([5_000, 10_000, 20_000, 50_000]))
        budget = max(1, int(period * rng.uniform(0.03, 0.2)))
        servers.append(ServerSpec(budget, period, core=int(rng.integers(n_cores)),
                                  criticality=int(rng.integers(3))))
    core = CoreModel(-rng.uniform(0.02, 0.2), rng.uniform(0.5, 2.0))
    ps, pd = rng.uniform(0.2, 0.8), rng.uniform(1.0, 3.0)
    ambient = rng.uniform(20, 40)
    theta_abs = ambient + core.steady(ps + pd * rng.uniform(0.5, 1.0))
    return McsConfig([0, 1, 2], servers, core, ps, pd, theta_abs, ambient, n_cores=n_cores)


def scripted_plan():
    srv = [ServerSpec(1000, 10_000, criticality=c) for c in (0, 1, 2, 0)]
    cfg = McsConfig([0, 1, 2], srv, CoreModel(-0.05, 1.5), 0.5, 2.0, 85.0, 25.0)
    return McsPlan(cfg, idle=[None] * 3, critical=[40.0, 50.0, 60.0], shift=[5.0, 7.0])


def run_script(p, samples):
    t0, a0 = samples[0]
    state = initial_state(p, a0, t0)
    seq = [(state.kind, state.level)]
    for t, amb in samples[1:]:
        state, _ = mode_step(state, amb, t, p)
        seq.append((state.kind, state.level))
    return seq


@criterion(7, "MCS: random patterns below theta_M + 0.05, monotone critical ambient, scripted modes")
def test_mcs_safety(record):
    rng = np.random.default_rng(707)
    configs, worst_excess, tries = 0, -math.inf, 0
    while configs < 50:
        tries += 1
        cfg = random_mcs_config(rng)
        try:
            search_idle_server(cfg, cfg.levels[0])
            p = plan(cfg)
        except Infeasible:
            continue
        configs += 1
        assert all(a <= b for a, b in zip(p.critical, p.critical[1:]))
        per_core = [[s for s in eligible(cfg, cfg.levels[0]) if s.core == c]
                    for c in range(cfg.n_cores)]
        for _ in range(1000):
            for srv in per_core:
                if srv:
                    peak = random_pattern_peak(srv, cfg.core, cfg.p_static, cfg.p_dynamic, rng, 1.0)
                    worst_excess = max(worst_excess, peak - cfg.theta_max)
    p = scripted_plan()
    rise = run_script(p, [(0, 30), (1, 45), (2, 55), (3, 65), (4, 30)])
    fall = run_script(p, [(0, 55), (1, 45), (5, 45), (8, 45), (9, 35), (13, 35), (14, 35)])
    bounce = run_script(p, [(0, 55), (1, 45), (3, 52), (4, 45), (6, 61)])
    record(f"{configs} configs ({tries} drawn), max excess {worst_excess:+.3f} C")
    assert worst_excess <= 0.05
    assert rise == [("M", 0), ("M", 1), ("M", 2), ("SHUTDOWN", 2), ("SHUTDOWN", 2)]
    assert fall == [("M", 2), ("S", 1), ("S", 1), ("M", 1), ("S", 0), ("S", 0), ("M", 0)]
    assert bounce == [("M", 2), ("S", 1), ("M", 2), ("S", 1), ("SHUTDOWN", 2)]


# ---- 8: estimation identifiability -------------------------------------------------------------------

RING = [(0, 1), (1, 2), (2, 3), (0, 3)]
CHAIN_EDGES = [(0, 1), (1, 2), (2, 3)]


def random_truth(rng):
    """The documented ring matrix with every entry perturbed by up to 10%."""
    A = REFERENCE_A_TILDE * rng.uniform(0.9, 1.1, (4, 4))
    return (A + A.T) / 2


def synthetic_data(rng, A, gamma, freqs, quant=None):
    n = len(A)
    chips = {f: rng.uniform(35, 45, n) for f in freqs}
    q = (lambda x: np.round(x / quant) * quant) if quant else (lambda x: x)
    by_freq = {f: [SteadyProfile(m, q(chips[f] + f**3 * np.linalg.solve(A, mask_vector(m, n))), f)
                   for m in range(2**n)] for f in freqs}
    mp = MatrixThermalParams.from_matrices(-gamma * A, gamma * np.eye(n))
    rise0 = np.linalg.solve(A, np.ones(n))
    t = np.arange(0.0, 400.0, 0.5)
    cool = TransientTrace(t, q(np.array([chips[1.0] + mp.expm(s) @ rise0 for s in t])), freq=1.0)
    return by_freq, cool, chips


@criterion(8, "estimation: A_tilde, gamma and f^3 ratios noiseless; steady error <= 1.25 C quantized")
def test_estimation_identifiability(record):
    rng = np.random.default_rng(808)
    freqs = [1.0, 1.2, 1.4]
    fro = gam = ratio = pred = 0.0
    for _ in range(20):
        A = random_truth(rng)
        gamma = rng.uniform(0.05, 0.5)
        tmpl = Template.from_adjacency(4, RING)

        by_freq, cool, _ = synthetic_data(rng, A, gamma, freqs)
        res = estimate(by_freq, cool, template=tmpl)
        fro = max(fro, np.linalg.norm(res.A_tilde - A) / np.linalg.norm(A))
        gam = max(gam, abs(res.gamma / gamma - 1))
        ratio = max(ratio, max(abs(res.gamma_ratio[f] / f**3 - 1) for f in freqs))

        by_freq, cool, chips = synthetic_data(rng, A, gamma, freqs, quant=1.0)
        res = estimate(by_freq, cool, template=tmpl)
        for f in freqs:
            for m in range(16):
                truth = chips[f] + f**3 * np.linalg.solve(A, mask_vector(m, 4))
                pred = max(pred, float(np.max(np.abs(predict_temperature(res, m, freq=f) - truth))))
    record(f"rel Frobenius {fro:.1e}, gamma {gam:.1e}, f^3 ratios {ratio:.1e}, "
           f"quantized steady error {pred:.2f} C")
    assert fro <= 1e-4
    assert gam <= 5e-3
    assert ratio <= 0.02
    assert pred <= 1.25


# ---- 9: anomaly localization and floorplan ----------------------------------------------------------

AUX = [0b000, 0b001, 0b010, 0b100, 0b101, 0b110, 0b111]


@criterion(9, "single fault localized 100/100; floorplan exact on chain and 2x2 grid")
def test_anomaly_and_floorplan(record):
    rng = np.random.default_rng(909)
    located = 0
    for _ in range(100):
        A = -random_coupled_A(rng, 3, coupling=(0.02, 0.12), leak=(0.05, 0.2))
        chip = rng.uniform(35, 45, 3)
        fault = int(rng.choice(AUX[1:]))
        delta = rng.choice([-1, 1]) * rng.uniform(2, 5)
        hit = np.ones(3) if rng.random() < 0.5 else np.eye(3)[rng.integers(3)]
        profiles = []
        for m in AUX:
            t = chip + np.linalg.solve(A, mask_vector(m, 3))
            if m == fault:
                t = t + delta * hit
            profiles.append(SteadyProfile(m, np.round(t, 1), label=f"X{m:03b}"[::-1]))
        rep = detect_anomaly(profiles)
        located += rep.status == "located" and rep.located == [f"X{fault:03b}"[::-1]]

    grid = np.array([[0.3, -0.1, -0.1, 0], [-0.1, 0.3, 0, -0.1],
                     [-0.1, 0, 0.3, -0.1], [0, -0.1, -0.1, 0.3]])
    chain = np.array([[0.30, -0.08, 0, 0], [-0.08, 0.31, -0.08, 0],
                      [0, -0.08, 0.29, -0.08], [0, 0, -0.08, 0.30]])
    cases = [(chain, CHAIN_EDGES), (grid, [(0, 1), (0, 2), (1, 3), (2, 3)]),
             (REFERENCE_A_TILDE, sorted(RING))]
    for _ in range(50):
        A = np.zeros((4, 4))
        for i, j in CHAIN_EDGES:
            A[i, j] = A[j, i] = -rng.uniform(0.05, 0.12)
        A[np.diag_indices(4)] = rng.uniform(0.28, 0.32, 4)
        cases.append((A, CHAIN_EDGES))
    exact = 0
    for A, edges in cases:
        idle = rng.uniform(35, 45, 4)
        profiles = [SteadyProfile(m, idle + np.linalg.solve(A, mask_vector(m, 4)))
                    for m in (0, 1, 2, 4, 8)]
        Y, Y0 = build_Y_onehot(profiles)
        exact += estimate_floorplan(Y, Y0, margin=0.2) == sorted(edges)
    record(f"located {located}/100; floorplan exact {exact}/{len(cases)}")
    assert located == 100
    assert exact == len(cases)


# ---- 10: documented matrix -------------------------------------------------------------------------------

@criterion(10, "documented A_tilde: real positive eigenvalues; one-hot steady columns to 1e-9")
def test_reference_matrix(record):
    ev = np.linalg.eigvals(REFERENCE_A_TILDE)
    assert np.all(np.abs(ev.imag) == 0) and np.all(ev.real > 0)
    res = EstimationResult(REFERENCE_A_TILDE, 1.0, 1.0, {1.0: 1.0}, {1.0: np.zeros(4)})
    cols = np.linalg.inv(REFERENCE_A_TILDE)
    worst = 0.0
    for i in range(4):
        rise = predict_temperature(res, 1 << i)
        worst = max(worst, float(np.max(np.abs(rise - cols[:, i]))),
                    float(np.max(np.abs(REFERENCE_A_TILDE @ rise - np.eye(4)[i]))))
    record(f"eigenvalues {np.sort(ev.real).round(4).tolist()}; max column error {worst:.1e}")
    assert worst <= 1e-9
