"""Config, trace and report formats.

Configs are YAML with times in milliseconds; they become integer
microseconds on load.  Unknown keys are rejected so typos fail loudly.
Reports are JSON with sorted keys, a schema version and the hash of the
config that produced them.
"""

import csv
import hashlib
import json
import math
from pathlib import Path

import numpy as np
import yaml

from .analysis import GenParams, Taskset, TaskSpec
from .errors import ConfigError, ParseError
from .estimation import SteadyProfile, TransientTrace, smooth_steady
from .servers import GpuServerSpec, ServerSpec
from .thermal import CoreModel, MatrixThermalParams, ScalarThermalParams

SCHEMA_VERSION = 1


def ms_to_us(ms, floor=False):
    """Milliseconds to integer microseconds; ``floor`` for budgets that must not grow."""
    us = float(ms) * 1000.0
    return int(math.floor(us + 1e-9)) if floor else int(round(us))


def us_to_ms(us):
    return us / 1000.0


def take(section, where, required=(), optional=()):
    """Validate keys of a config mapping; returns it unchanged."""
    if section is None:
        section = {}
    if not isinstance(section, dict):
        raise ConfigError(f"{where}: expected a mapping")
    unknown = set(section) - set(required) - set(optional)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    missing = [k for k in required if k not in section]
    if missing:
        raise ConfigError(f"{where}: missing keys {missing}")
    return section


def load_yaml(path):
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    return {} if data is None else data


def config_hash(obj):
    blob = json.dumps(obj, sort_keys=True, default=_jsonable).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# --- thermal --------------------------------------------------------------------

def scalar_params(d, where="thermal"):
    take(d, where, ("alpha", "beta"), ("lam", "gamma"))
    try:
        return ScalarThermalParams(float(d["alpha"]), float(d["beta"]),
                                   gamma=d.get("gamma"), lam=d.get("lam"))
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def core_model(d, where="core"):
    take(d, where, ("a", "b"))
    try:
        return CoreModel(float(d["a"]), float(d["b"]))
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def matrix_params(d, where="thermal"):
    take(d, where, ("A", "B"), ("chip_offset",))
    try:
        return MatrixThermalParams.from_matrices(np.array(d["A"], dtype=float),
                                                 np.array(d["B"], dtype=float),
                                                 d.get("chip_offset"))
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


# --- tasksets -------------------------------------------------------------------

SERVER_KEYS = ("budget_ms", "period_ms")
SERVER_OPT = ("policy", "core", "criticality", "mot_reserve_ms")
TASK_KEYS = ("c1_ms", "period_ms", "priority")
TASK_OPT = ("server", "m1_ms", "k_ms", "m2_ms", "c2_ms", "uses_gpu")


def server_from_dict(d, where):
    take(d, where, SERVER_KEYS, SERVER_OPT)
    try:
        return ServerSpec(ms_to_us(d["budget_ms"], floor=True), ms_to_us(d["period_ms"]),
                          d.get("policy", "sporadic"), int(d.get("core", 0)),
                          int(d.get("criticality", 0)), ms_to_us(d.get("mot_reserve_ms", 0)))
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def server_to_dict(s):
    return {"budget_ms": us_to_ms(s.budget), "period_ms": us_to_ms(s.period), "policy": s.policy,
            "core": s.core, "criticality": s.criticality, "mot_reserve_ms": us_to_ms(s.mot_reserve)}


def taskset_from_dict(d, where="taskset"):
    take(d, where, ("cpu_servers", "tasks"), ("gpu_server", "queue_policy"))
    servers = [server_from_dict(s, f"{where}.cpu_servers[{i}]")
               for i, s in enumerate(d["cpu_servers"] or [])]
    gpu = None
    if d.get("gpu_server") is not None:
        g = take(d["gpu_server"], f"{where}.gpu_server", SERVER_KEYS)
        try:
            gpu = GpuServerSpec(ms_to_us(g["budget_ms"], floor=True), ms_to_us(g["period_ms"]))
        except ValueError as exc:
            raise ConfigError(f"{where}.gpu_server: {exc}") from exc
    tasks = []
    for i, t in enumerate(d["tasks"] or []):
        w = f"{where}.tasks[{i}]"
        take(t, w, TASK_KEYS, TASK_OPT)
        try:
            tasks.append(TaskSpec(
                ms_to_us(t["c1_ms"]), ms_to_us(t["period_ms"]), int(t["priority"]),
                int(t.get("server", 0)), ms_to_us(t.get("m1_ms", 0)), ms_to_us(t.get("k_ms", 0)),
                ms_to_us(t.get("m2_ms", 0)), ms_to_us(t.get("c2_ms", 0)),
                bool(t.get("uses_gpu", False))))
        except ValueError as exc:
            raise ConfigError(f"{w}: {exc}") from exc
    try:
        return Taskset(tasks, servers, gpu, d.get("queue_policy", "hybrid"))
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def taskset_to_dict(ts):
    out = {
        "queue_policy": ts.queue_policy,
        "cpu_servers": [server_to_dict(s) for s in ts.cpu_servers],
        "tasks": [],
    }
    if ts.gpu_server is not None:
        out["gpu_server"] = {"budget_ms": us_to_ms(ts.gpu_server.budget),
                             "period_ms": us_to_ms(ts.gpu_server.period)}
    for t in ts.tasks:
        row = {"c1_ms": us_to_ms(t.c1), "period_ms": us_to_ms(t.period), "priority": t.priority,
               "server": t.server}
        if t.uses_gpu:
            row.update(uses_gpu=True, m1_ms=us_to_ms(t.m1), k_ms=us_to_ms(t.k),
                       m2_ms=us_to_ms(t.m2), c2_ms=us_to_ms(t.c2))
        out["tasks"].append(row)
    return out


GEN_KEYS = ("n_cores", "n_tasks", "utilization", "period_ms", "gpu_fraction", "gpu_ratio",
            "misc_ratio", "cpu_server_period_ms", "gpu_server_period_ms", "policy", "mot",
            "cpu_budget_ms", "gpu_budget_ms", "queue_policy", "seed")


def gen_params_from_dict(d, where="gen"):
    take(d, where, optional=GEN_KEYS)
    fields = GenParams.__dataclass_fields__
    kwargs = {}
    for k, v in d.items():
        if k not in fields:
            raise ConfigError(f"{where}: {k} is not a generator setting")
        kwargs[k] = tuple(v) if isinstance(v, list) else v
    try:
        return GenParams(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


# --- traces and profiles ------------------------------------------------------

def read_trace(path, n_cores=None, mask=0, freq=0.0):
    """CSV with header ``t_s,core0_C,...``; an optional trailing ``gpu_C`` column is kept."""
    path = Path(path)
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError("empty file", 1) from None
        if not header or header[0] != "t_s":
            raise ParseError("first column must be t_s", 1)
        cols = header[1:]
        cores = [c for c in cols if c != "gpu_C"]
        expected = [f"core{i}_C" for i in range(len(cores))]
        if cores != expected or (cols and "gpu_C" in cols and cols[-1] != "gpu_C"):
            raise ParseError(f"expected columns {expected} (+ optional gpu_C)", 1)
        if n_cores is not None and len(cores) != n_cores:
            raise ParseError(f"file has {len(cores)} cores, expected {n_cores}", 1)
        t, rows = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}", lineno)
            try:
                vals = [float(c) for c in row]
            except ValueError:
                raise ParseError("non-numeric field", lineno) from None
            if not all(math.isfinite(v) for v in vals):
                raise ParseError("non-finite value", lineno)
            if t and vals[0] <= t[-1]:
                raise ParseError(f"time {vals[0]} does not increase", lineno)
            t.append(vals[0])
            rows.append(vals[1:])
    if not t:
        raise ParseError("no samples", 2)
    return TransientTrace(np.array(t), np.array(rows), mask=mask, freq=freq)


def write_trace_csv(path, times, temps, with_gpu=False):
    temps = np.atleast_2d(temps)
    n = temps.shape[1] - (1 if with_gpu else 0)
    header = ["t_s"] + [f"core{i}_C" for i in range(n)] + (["gpu_C"] if with_gpu else [])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for t, row in zip(times, temps):
            w.writerow([repr(float(t))] + [repr(float(x)) for x in row])


def read_ambient(path):
    """CSV ``t_s,ambient_C`` as a list of (t, ambient)."""
    out = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader, [])]
        if header != ["t_s", "ambient_C"]:
            raise ParseError("header must be t_s,ambient_C", 1)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                t, amb = float(row[0]), float(row[1])
            except (ValueError, IndexError):
                raise ParseError("expected two numbers", lineno) from None
            if out and t <= out[-1][0]:
                raise ParseError(f"time {t} does not increase", lineno)
            out.append((t, amb))
    return out


def parse_mask(value):
    """Masks are written as bit strings with core 0 first (``"1010"``) or as integers."""
    if isinstance(value, int):
        return value
    s = str(value).strip()
    if not s or set(s) - {"0", "1"}:
        raise ConfigError(f"bad mask {value!r}")
    return sum(1 << i for i, c in enumerate(s) if c == "1")


def load_manifest(path):
    """Profile manifest: steady profiles per frequency plus an optional cooling trace."""
    d = load_yaml(path)
    take(d, "manifest", ("profiles",),
         ("cooling", "window", "margin", "edges", "shared_edges", "monotone", "base_freq",
          "settle_s"))
    base = Path(path).parent
    window = int(d.get("window", 100))
    settle = float(d.get("settle_s", 0.0))
    by_freq = {}
    for i, p in enumerate(d["profiles"]):
        take(p, f"profiles[{i}]", ("mask", "freq", "file"), ("label",))
        tr = read_trace(base / p["file"])
        temps = tr.temps[tr.t >= tr.t[0] + settle]
        try:
            steady = smooth_steady(temps, window)
        except Exception as exc:
            raise ConfigError(f"profiles[{i}] ({p['file']}): {exc}") from exc
        freq = float(p["freq"])
        by_freq.setdefault(freq, []).append(
            SteadyProfile(parse_mask(p["mask"]), steady, freq, p.get("label", p["file"])))
    cooling = None
    if d.get("cooling") is not None:
        c = take(d["cooling"], "cooling", ("file", "freq"), ("mask",))
        cooling = read_trace(base / c["file"], mask=parse_mask(c.get("mask", 0)),
                             freq=float(c["freq"]))
    return d, by_freq, cooling


# --- reports -------------------------------------------------------------------

def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, (set, tuple)):
        return list(x)
    raise TypeError(f"cannot serialize {type(x).__name__}")


def _clean(x):
    """Recursively convert numpy values; non-finite floats become strings."""
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, np.ndarray):
        return _clean(x.tolist())
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else str(x)
    return x


def write_report(results, path, command="", config=None, force=False):
    path = Path(path)
    if path.exists() and not force:
        raise FileExistsError(f"{path} exists; use --force to overwrite")
    doc = {"schema_version": SCHEMA_VERSION, "command": command,
           "config_hash": config_hash(config) if config is not None else None,
           "results": _clean(results)}
    text = json.dumps(doc, sort_keys=True, indent=2) + "\n"
    path.write_text(text)
    return doc


def read_report(path):
    doc = json.loads(Path(path).read_text())
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"{path}: unsupported schema version {doc.get('schema_version')}")
    return doc


def write_events_jsonl(path, trace):
    """One JSON object per line: {"t_us", "event", "a", "b"}; a/b meaning depends on the event."""
    with open(path, "w") as fh:
        for t, name, a, b in trace.event_rows():
            fh.write(json.dumps({"t_us": t, "event": name, "a": a, "b": b}) + "\n")
