"""Command-line entry points."""

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from . import io
from .analysis import analyze_taskset, generate_taskset
from .errors import ThermschedError
from .estimation import (EstimationResult, Template, estimate, predict_temperature)
from .mcs import McsConfig, plan as mcs_plan
from .servers import Unconstrained, cpu_gpu_budgets, design_budget, max_server_utilization
from .simulator import (PowerModel, SimConfig, collect_metrics, mode_events_from_ambient,
                        simulate)

log = logging.getLogger("thermsched")


def _emit(args, results, config):
    if args.out:
        io.write_report(results, args.out, command=args.command, config=config, force=args.force)
        log.info("wrote %s", args.out)
    else:
        doc = {"schema_version": io.SCHEMA_VERSION, "command": args.command,
               "config_hash": io.config_hash(config), "results": io._clean(results)}
        json.dump(doc, sys.stdout, sort_keys=True, indent=2)
        sys.stdout.write("\n")


def _check_free(path, force):
    if path and Path(path).exists() and not force:
        raise FileExistsError(f"{path} exists; use --force to overwrite")


# --- subcommands ------------------------------------------------------------

def cmd_design_server(args):
    cfg = io.take(io.load_yaml(args.config), "config",
                  ("thermal", "theta_max", "period_ms"), ("policy", "halving", "gpu"))
    p = io.scalar_params(cfg["thermal"])
    period = float(cfg["period_ms"]) / 1e3
    policy = cfg.get("policy", "sporadic")
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", Unconstrained)
        if cfg.get("gpu") is not None:
            g = io.take(cfg["gpu"], "gpu", ("thermal", "theta_max", "period_ms", "gamma_cross"))
            c_cpu, c_gpu = cpu_gpu_budgets(
                float(cfg["theta_max"]), float(g["theta_max"]), period,
                float(g["period_ms"]) / 1e3, p, io.scalar_params(g["thermal"], "gpu.thermal"),
                g["gamma_cross"])
            results = {"cpu_budget_ms": c_cpu * 1e3, "gpu_budget_ms": c_gpu * 1e3}
        else:
            c = design_budget(policy, float(cfg["theta_max"]), period, p,
                              halving=bool(cfg.get("halving", False)))
            results = {"budget_ms": c * 1e3}
    for w in caught:
        log.warning("%s", w.message)
    results.update(policy=policy, period_ms=float(cfg["period_ms"]),
                   max_utilization=max_server_utilization(float(cfg["theta_max"]), p),
                   unconstrained=bool(caught))
    _emit(args, results, cfg)
    return 0


def _analysis_results(ts, report):
    return {
        "queue_used": report.queue_used,
        "taskset_schedulable": report.taskset_schedulable,
        "tasks": [{"task": i, "period_us": t.period, "W_us": r.W, "B_local_us": r.B_local,
                   "B_remote_us": r.B_remote, "H_us": r.H, "schedulable": r.schedulable}
                  for i, (t, r) in enumerate(zip(ts.tasks, report.tasks))],
        "alternatives": {q: alt.n_schedulable
                         for q, alt in report.alternatives.items()},
    }


def cmd_analyze(args):
    raw = io.load_yaml(args.taskset)
    ts = io.taskset_from_dict(raw)
    report = analyze_taskset(ts, rm_tight=args.rm_tight)
    _emit(args, _analysis_results(ts, report), raw)
    return 0


def cmd_gen_tasksets(args):
    raw = io.load_yaml(args.config) if args.config else {}
    gp = io.gen_params_from_dict(raw)
    seed = gp.seed if args.seed is None else args.seed
    rng = np.random.default_rng(seed)
    _check_free(args.out, args.force)
    sets = [io.taskset_to_dict(generate_taskset(gp, rng=rng)) for _ in range(args.count)]
    doc = {"schema_version": io.SCHEMA_VERSION, "seed": seed,
           "config_hash": io.config_hash({"gen": raw, "seed": seed, "count": args.count}),
           "tasksets": sets}
    text = yaml.safe_dump(doc, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


SIM_KEYS = ("taskset", "duration_s")
SIM_OPT = ("release", "seed", "queue_policy", "max_jobs", "thermal", "power", "theta_max",
           "grid_step_ms", "mode_events", "mcs", "ambient_file")


def _sim_config(cfg, base):
    io.take(cfg, "config", SIM_KEYS, SIM_OPT)
    ts_src = cfg["taskset"]
    ts = io.taskset_from_dict(io.load_yaml(base / ts_src) if isinstance(ts_src, str) else ts_src)
    release = cfg.get("release", "synchronous")
    if release == "random":
        release = ("random", int(cfg.get("seed", 0)))
    elif isinstance(release, list):
        release = [io.ms_to_us(x) for x in release]
    elif release != "synchronous":
        raise ThermschedError(f"release must be synchronous, random or a list, not {release!r}")
    thermal = None
    if cfg.get("thermal") is not None:
        th = cfg["thermal"]
        thermal = io.matrix_params(th) if "A" in th else io.core_model(th, "thermal")
    power = PowerModel(**io.take(cfg.get("power"), "power", optional=PowerModel.__dataclass_fields__))
    plan_ = ambient = None
    if cfg.get("mcs") is not None:
        plan_ = mcs_plan(_mcs_config(cfg["mcs"], ts.cpu_servers))
        if cfg.get("ambient_file"):
            ambient = io.read_ambient(base / cfg["ambient_file"])
    grid = cfg.get("grid_step_ms")
    return SimConfig(
        taskset=ts, duration=float(cfg["duration_s"]), thermal=thermal, power=power,
        theta_max=float(cfg.get("theta_max", float("inf"))), release_pattern=release,
        queue_policy=cfg.get("queue_policy"), max_jobs=cfg.get("max_jobs"),
        mode_events=[tuple(e) for e in cfg.get("mode_events", [])],
        ambient_scenario=ambient, mcs_plan=plan_,
        grid_step=None if grid is None else float(grid) / 1e3)


def cmd_simulate(args):
    raw = io.load_yaml(args.config)
    sim_cfg = _sim_config(raw, Path(args.config).parent)
    for path in (args.out, args.events, args.temps):
        _check_free(path, args.force)
    trace = simulate(sim_cfg)
    results = collect_metrics(trace)
    results["queue_used"] = trace.queue_policy
    results["end_time_us"] = trace.end_time
    results["violations"] = [{"t_s": t, "node": i, "temp": v} for t, i, v in trace.violations[:1000]]
    if args.analysis:
        ana = io.read_report(args.analysis)["results"]
        results["soundness"] = soundness_check(ana, results)
    if args.events:
        io.write_events_jsonl(args.events, trace)
    if args.temps and trace.temps is not None:
        io.write_trace_csv(args.temps, trace.times, trace.temps,
                           with_gpu=trace.temps.shape[1] == trace.n_cores + 1)
    _emit(args, results, raw)
    return 0


def soundness_check(analysis, sim):
    """Cross-link analysed bounds with observed responses: every schedulable task must hold."""
    observed = {t["task"]: t for t in sim["tasks"]}
    rows, ok = [], True
    for t in analysis["tasks"]:
        if not t["schedulable"] or t["task"] not in observed:
            continue
        obs = observed[t["task"]]
        holds = obs["max_response_us"] <= t["W_us"] and obs["deadline_misses"] == 0
        ok &= holds
        rows.append({"task": t["task"], "W_us": t["W_us"],
                     "observed_us": obs["max_response_us"], "holds": holds})
    return {"sound": ok, "tasks": rows}


MCS_KEYS = ("levels", "core", "p_static", "p_dynamic", "theta_max_abs", "ambient")
MCS_OPT = ("servers", "lam", "grid", "max_idle_period_s", "n_cores")


def _mcs_config(d, servers=None):
    io.take(d, "mcs", MCS_KEYS, MCS_OPT)
    if servers is None:
        servers = [io.server_from_dict(s, f"mcs.servers[{i}]")
                   for i, s in enumerate(d.get("servers") or [])]
    return McsConfig(list(d["levels"]), servers, io.core_model(d["core"], "mcs.core"),
                     float(d["p_static"]), float(d["p_dynamic"]), float(d["theta_max_abs"]),
                     float(d["ambient"]), float(d.get("lam", 1.0)), float(d.get("grid", 1e-3)),
                     float(d.get("max_idle_period_s", 10.0)), d.get("n_cores"))


def _plan_results(p):
    return {
        "levels": [{"level": lv, "idle_util": idle.util, "idle_period_s": idle.period,
                    "critical_ambient_C": amb}
                   for lv, idle, amb in zip(p.config.levels, p.idle, p.critical)],
        "shift_time_s": [{"from": p.config.levels[i + 1], "to": p.config.levels[i], "t_s": s}
                         for i, s in enumerate(p.shift)],
    }


def cmd_mcs_plan(args):
    raw = io.load_yaml(args.config)
    p = mcs_plan(_mcs_config(raw))
    _emit(args, _plan_results(p), raw)
    return 0


def cmd_mcs_run(args):
    raw = io.load_yaml(args.config)
    p = mcs_plan(_mcs_config(raw))
    samples = io.read_ambient(args.ambient)
    _, mode_log = mode_events_from_ambient(p, samples)
    results = _plan_results(p)
    results["transitions"] = [
        {"t_s": t, "mode": kind if kind == "SHUTDOWN" else f"{kind}{p.config.levels[lv]}",
         "actions": [{"action": a, "servers": s} for a, s in acts]}
        for t, kind, lv, acts in mode_log]
    _emit(args, results, {"config": raw, "ambient": samples})
    return 0


def _result_to_dict(res):
    return {"A_tilde": res.A_tilde, "gamma": res.gamma, "base_freq": res.base_freq,
            "gamma_ratio": [[f, r] for f, r in res.gamma_ratio.items()],
            "chip_offset": [[f, v] for f, v in res.chip_offset.items()],
            "floorplan": [list(e) for e in res.floorplan],
            "template": None if res.template is None else res.template.groups,
            "relative_power": [[f, r] for f, r in res.relative_power().items()]}


def _result_from_dict(d):
    return EstimationResult(
        np.array(d["A_tilde"], dtype=float), float(d["gamma"]), float(d["base_freq"]),
        {float(f): float(r) for f, r in d["gamma_ratio"]},
        {float(f): np.array(v, dtype=float) for f, v in d["chip_offset"]},
        None if d.get("template") is None else Template(np.array(d["template"])),
        [tuple(e) for e in d.get("floorplan", [])])


def cmd_estimate(args):
    manifest, by_freq, cooling = io.load_manifest(args.manifest)
    if cooling is None:
        raise ThermschedError("manifest needs a cooling trace to calibrate gamma")
    template = None
    if manifest.get("edges") is not None:
        n = len(next(iter(by_freq.values()))[0].temps)
        template = Template.from_adjacency(n, [tuple(e) for e in manifest["edges"]],
                                           shared=bool(manifest.get("shared_edges", False)))
    res = estimate(by_freq, cooling, margin=float(manifest.get("margin", 0.5)),
                   shared_edges=bool(manifest.get("shared_edges", False)),
                   monotone=manifest.get("monotone"), base_freq=manifest.get("base_freq"),
                   template=template)
    _emit(args, _result_to_dict(res), manifest)
    return 0


def cmd_predict(args):
    doc = io.read_report(args.model)
    res = _result_from_dict(doc["results"])
    theta0 = None if args.theta0 is None else [float(x) for x in args.theta0.split(",")]
    t = float("inf") if args.t is None else args.t
    temps = predict_temperature(res, io.parse_mask(args.mask), theta0, 0.0, t,
                                args.freq if args.freq is not None else res.base_freq)
    _emit(args, {"mask": args.mask, "t_s": t, "temps_C": temps},
          {"model": doc.get("config_hash"), "mask": args.mask, "t": t, "freq": args.freq})
    return 0


def cmd_report(args):
    ana = io.read_report(args.analysis)["results"]
    sim = io.read_report(args.simulation)["results"]
    results = {"soundness": soundness_check(ana, sim),
               "schedulable_tasks": sum(t["schedulable"] for t in ana["tasks"]),
               "deadline_misses": sum(t["deadline_misses"] for t in sim["tasks"]),
               "thermal": sim.get("thermal", {})}
    _emit(args, results, {"analysis": ana, "simulation": sim})
    return 0


# --- parser ------------------------------------------------------------------

def build_parser():
    ap = argparse.ArgumentParser(prog="thermsched", description=__doc__)
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(fn=fn)
        p.add_argument("-o", "--out", help="report path (default: stdout)")
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")
        return p

    p = add("design-server", cmd_design_server, "thermally safe server budgets")
    p.add_argument("config")
    p = add("analyze", cmd_analyze, "response-time analysis of a taskset")
    p.add_argument("taskset")
    p.add_argument("--rm-tight", action="store_true", help="tighter local blocking under RM")
    p = add("gen-tasksets", cmd_gen_tasksets, "random tasksets")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--count", type=int, default=1)
    p = add("simulate", cmd_simulate, "discrete-event co-simulation")
    p.add_argument("config")
    p.add_argument("--events", help="JSON-lines event log")
    p.add_argument("--temps", help="temperature CSV")
    p.add_argument("--analysis", help="analysis report to cross-check against")
    p = add("mcs-plan", cmd_mcs_plan, "idle servers and critical ambients per level")
    p.add_argument("config")
    p = add("mcs-run", cmd_mcs_run, "drive the mode machine with an ambient CSV")
    p.add_argument("config")
    p.add_argument("ambient")
    p = add("estimate", cmd_estimate, "thermal parameters from profiles")
    p.add_argument("manifest")
    p = add("predict", cmd_predict, "temperatures from an estimated model")
    p.add_argument("model")
    p.add_argument("--mask", required=True, help="busy cores, core 0 first, e.g. 1010")
    p.add_argument("--t", type=float, help="seconds after start (default: steady state)")
    p.add_argument("--theta0", help="initial rise over idle, comma separated")
    p.add_argument("--freq", type=float)
    p = add("report", cmd_report, "combine analysis and simulation reports")
    p.add_argument("analysis")
    p.add_argument("simulation")
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s: %(message)s")
    try:
        return args.fn(args)
    except (ThermschedError, FileExistsError, OSError, ValueError) as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
