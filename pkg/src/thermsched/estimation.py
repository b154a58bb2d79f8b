"""Thermal parameter estimation from steady-state and transient sensor data.

Steady profiles give the conduction structure up to one scale per frequency:
the rise matrix G (column i = rise of every core when only core i is busy)
inverts to A_tilde = -A / gamma.  A cooling trace then fixes gamma.  Power in
watts is not identifiable from temperature alone; only ratios across
frequencies are.
"""

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
from scipy.optimize import lsq_linear, minimize, minimize_scalar

from .errors import (DuplicateMask, FlatTrace, MissingProfile, NonConvergence, RankDeficient,
                     Singular, TooShort, UnknownFrequency)
from .thermal import MatrixThermalParams, temp_const_power_matrix

# Documented 4-core reference matrix: a ring of four cores, (0, 2) and (1, 3) not adjacent.
REFERENCE_A_TILDE = np.array([
    [0.2961, -0.1324, 0.0, -0.1194],
    [-0.1324, 0.3017, -0.1579, 0.0],
    [0.0, -0.1579, 0.3088, -0.1269],
    [-0.1194, 0.0, -0.1269, 0.2798],
])

COND_LIMIT = 1e12


@dataclass
class SteadyProfile:
    mask: int             # bit i set: core i fully busy
    temps: np.ndarray     # deg C, one per core
    freq: float = 0.0
    label: str = ""

    def __post_init__(self):
        self.temps = np.asarray(self.temps, dtype=float)
        if not np.all(np.isfinite(self.temps)):
            raise ValueError(f"profile {self.label or self.mask}: non-finite temperature")
        if self.mask < 0:
            raise ValueError("mask must be >= 0")


@dataclass
class TransientTrace:
    t: np.ndarray              # s, strictly increasing
    temps: np.ndarray          # samples x cores, deg C
    mask: int = 0              # activity held during the trace
    freq: float = 0.0
    ambient: float | None = None

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        self.temps = np.atleast_2d(np.asarray(self.temps, dtype=float))
        if self.temps.shape[0] != len(self.t):
            raise ValueError("one temperature row per time stamp")
        if np.any(np.diff(self.t) <= 0):
            raise ValueError("time stamps must be strictly increasing")


@dataclass
class Template:
    """Parameter grouping for A_tilde: ``groups[i, j]`` is a parameter index or -1 for zero.

    Diagonal groups are constrained positive, off-diagonal groups non-positive.
    """

    groups: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.groups, dtype=int)
        if g.ndim != 2 or g.shape[0] != g.shape[1]:
            raise ValueError("template must be square")
        if not np.array_equal(g, g.T):
            raise ValueError("template must be symmetric")
        if np.any(np.diag(g) < 0):
            raise ValueError("diagonal entries cannot be fixed to zero")
        diag, off = set(np.diag(g)), set(g[~np.eye(len(g), dtype=bool)]) - {-1}
        if diag & off:
            raise ValueError("a parameter cannot be shared by diagonal and off-diagonal entries")
        used = sorted(diag | off)
        if used != list(range(len(used))):
            raise ValueError("parameter indices must be 0..r-1")
        self.groups = g

    @property
    def n(self):
        return self.groups.shape[0]

    @property
    def n_params(self):
        return int(self.groups.max()) + 1

    @property
    def positive(self):
        pos = np.zeros(self.n_params, dtype=bool)
        pos[np.diag(self.groups)] = True
        return pos

    def basis(self):
        out = np.zeros((self.n_params, self.n, self.n))
        for k in range(self.n_params):
            out[k][self.groups == k] = 1.0
        return out

    def assemble(self, params):
        return np.tensordot(np.asarray(params, dtype=float), self.basis(), axes=1)

    def project(self, M):
        """Least-squares parameters for ``M``: the mean over each group, clipped to its sign."""
        p = np.array([M[self.groups == k].mean() for k in range(self.n_params)])
        return np.where(self.positive, np.maximum(p, 1e-12), np.minimum(p, 0.0))

    @classmethod
    def dense(cls, n):
        g = -np.ones((n, n), dtype=int)
        k = 0
        for i in range(n):
            g[i, i] = k
            k += 1
        for i, j in combinations(range(n), 2):
            g[i, j] = g[j, i] = k
            k += 1
        return cls(g)

    @classmethod
    def from_adjacency(cls, n, edges, shared=False):
        """Distinct diagonal entries; one parameter per edge, or one shared by all edges."""
        g = -np.ones((n, n), dtype=int)
        for i in range(n):
            g[i, i] = i
        k = n
        for i, j in sorted({tuple(sorted(e)) for e in edges}):
            g[i, j] = g[j, i] = k
            if not shared:
                k += 1
        return cls(g)


@dataclass
class FitResult:
    A_tilde: np.ndarray
    params: np.ndarray
    residual: float
    converged: bool
    ratios: dict = field(default_factory=dict)


@dataclass
class EstimationResult:
    A_tilde: np.ndarray                   # at the base frequency
    gamma: float                          # at the base frequency
    base_freq: float
    gamma_ratio: dict                     # freq -> gamma_f / gamma_base
    chip_offset: dict                     # freq -> idle temperatures, deg C
    template: Template | None = None
    floorplan: list = field(default_factory=list)

    @property
    def A(self):
        return -self.gamma * self.A_tilde

    def relative_power(self):
        return relative_power(self.gamma_ratio)

    def model(self, freq):
        if freq not in self.gamma_ratio or freq not in self.chip_offset:
            raise UnknownFrequency(f"no calibration for frequency {freq}")
        # A is shared by all frequencies; unit activity injects gamma_f per busy core
        gamma_f = self.gamma * self.gamma_ratio[freq]
        return MatrixThermalParams.from_matrices(self.A, gamma_f * np.eye(len(self.A_tilde)),
                                                 chip_offset=self.chip_offset[freq])


# --- pre-processing ------------------------------------------------------------

def smooth_steady(temps, window):
    """Mean of the last ``window`` samples of each core."""
    temps = np.atleast_2d(np.asarray(temps, dtype=float))
    if window < 1:
        raise ValueError("window must be >= 1")
    if temps.shape[0] < window:
        raise TooShort(f"need {window} samples, have {temps.shape[0]}")
    return temps[-window:].mean(axis=0)


def _split_idle(profiles, idle):
    if idle is None:
        idle = [p for p in profiles if p.mask == 0]
        if len(idle) != 1:
            raise MissingProfile("need exactly one all-idle profile")
        idle = idle[0]
    busy = [p for p in profiles if p.mask != 0]
    return busy, idle


def build_Y_onehot(profiles, idle=None):
    """(Y, Y0) with row i of Y the temperatures while only core i is busy."""
    busy, idle = _split_idle(profiles, idle)
    n = len(idle.temps)
    rows = {}
    for p in busy:
        if p.mask & (p.mask - 1):
            continue
        i = p.mask.bit_length() - 1
        if i >= n:
            raise ValueError(f"mask {p.mask:b} names a core beyond {n}")
        if i in rows:
            raise DuplicateMask(f"two profiles for core {i}")
        rows[i] = p.temps
    missing = [i for i in range(n) if i not in rows]
    if missing:
        raise MissingProfile(f"no single-core profile for cores {missing}")
    freqs = {p.freq for p in busy} | {idle.freq}
    if len(freqs) > 1:
        raise ValueError("profiles mix frequencies")
    return np.array([rows[i] for i in range(n)]), idle.temps.copy()


def mask_vector(mask, n):
    return np.array([(mask >> i) & 1 for i in range(n)], dtype=float)


def build_Y_ensemble(profiles, idle=None):
    """Least-squares single-core rows from any set of busy masks (repeats allowed)."""
    busy, idle = _split_idle(profiles, idle)
    n = len(idle.temps)
    D = np.array([mask_vector(p.mask, n) for p in busy]).reshape(-1, n)
    if np.linalg.matrix_rank(D) < n:
        raise RankDeficient("busy masks do not separate every core")
    U = np.array([p.temps - idle.temps for p in busy])
    rows, *_ = np.linalg.lstsq(D, U, rcond=None)
    return rows + idle.temps, idle.temps.copy()


def rise_matrix(Y, Y0):
    """G with G[:, i] = rise of all cores when core i alone is busy."""
    return (np.asarray(Y, dtype=float) - np.asarray(Y0, dtype=float)[None, :]).T


def invert_Atilde(Y, Y0):
    G = rise_matrix(Y, Y0)
    if not np.all(np.isfinite(G)) or np.linalg.cond(G) > COND_LIMIT:
        raise Singular("rise matrix is singular")
    return np.linalg.inv(G)


def check_structure(A_tilde, tol=1e-9):
    """Which of the physical sign/symmetry properties hold (report only)."""
    off = A_tilde[~np.eye(len(A_tilde), dtype=bool)]
    return {
        "symmetric": bool(np.allclose(A_tilde, A_tilde.T, atol=tol)),
        "positive_diagonal": bool(np.all(np.diag(A_tilde) > 0)),
        "nonpositive_offdiagonal": bool(np.all(off <= tol)),
    }


# --- anomaly detection ------------------------------------------------------

def _identities(by_mask, n):
    """Superposition identities available in a profile set as {mask: coefficient} maps."""
    found = []
    present = set(by_mask)
    for z in present:
        if bin(z).count("1") < 2:
            continue
        bits = [1 << i for i in range(n) if z >> i & 1]
        if all(b in present for b in bits) and 0 in present:
            terms = {z: 1.0, 0: len(bits) - 1.0}
            for b in bits:
                terms[b] = -1.0
            found.append(terms)
    seen = set()
    for z in present:
        for i, j in combinations(range(n), 2):
            bi, bj = 1 << i, 1 << j
            if z & (bi | bj):
                continue
            face = (z, z | bi, z | bj, z | bi | bj)
            if all(c in present for c in face) and face not in seen:
                seen.add(face)
                found.append({face[3]: 1.0, face[1]: -1.0, face[2]: -1.0, face[0]: 1.0})
    unique = []
    for terms in found:
        if terms not in unique:
            unique.append(terms)
    return unique


@dataclass
class AnomalyReport:
    status: str                       # "clean", "suspects" or "located"
    located: list = field(default_factory=list)
    suspects: list = field(default_factory=list)
    inconsistent: list = field(default_factory=list)   # identities as lists of masks
    checked: int = 0


def detect_anomaly(profiles, quant_step=0.1):
    """Check superposition across profiles and localize a single faulty one.

    An identity is inconsistent when its summed absolute residual exceeds two
    quantization steps per core.  The all-idle profile is the trusted base.
    """
    by_mask = {}
    for p in profiles:
        if p.mask in by_mask:
            raise DuplicateMask(f"two profiles for mask {p.mask:b}")
        by_mask[p.mask] = p
    n = len(next(iter(by_mask.values())).temps)
    ids = _identities(by_mask, n)
    if len(ids) < 2:
        raise ValueError("need at least two testable identities")
    threshold = 2.0 * quant_step * n
    bad, good = [], []
    for terms in ids:
        r = sum(c * by_mask[m].temps for m, c in terms.items())
        (bad if np.abs(r).sum() > threshold else good).append(set(terms))
    label = lambda m: by_mask[m].label or format(m, f"0{n}b")[::-1]
    report = AnomalyReport("clean", inconsistent=[sorted(s) for s in bad], checked=len(ids))
    if not bad:
        return report
    cand = set.intersection(*bad) - set().union(*good) - {0}
    if len(cand) == 1:
        report.status = "located"
        report.located = [label(m) for m in cand]
    else:
        report.status = "suspects"
        report.suspects = sorted(label(m) for m in (cand or set().union(*bad) - {0}))
    return report


# --- floorplan -------------------------------------------------------------

def reduced_weights(Y, Y0, reduce="min"):
    """Symmetric weights: how much less core j heats than core i when i is busy."""
    rows = np.asarray(Y, dtype=float) - np.asarray(Y0, dtype=float)[None, :]
    w = np.diag(rows)[:, None] - rows
    ops = {"min": np.minimum, "max": np.maximum, "mean": lambda a, b: 0.5 * (a + b)}
    if reduce not in ops:
        raise ValueError(f"unknown reduction {reduce!r}")
    w = ops[reduce](w, w.T)
    np.fill_diagonal(w, np.inf)
    return w


def estimate_floorplan(Y, Y0, margin, reduce="min", ip_rise=None):
    """Adjacency edges (i, j) with i < j; an extra node n is the IP when ``ip_rise`` is given.

    Starting from core 0, the unvisited core with the smallest weight to the
    visited set joins next, one at a time.  It is linked to every visited core
    whose weight is within ``margin`` of that smallest weight.
    """
    w = reduced_weights(Y, Y0, reduce)
    n = len(w)
    if n < 2:
        raise ValueError("need at least two cores")
    edges = set()
    visited = [0]
    while len(visited) < n:
        rest = [v for v in range(n) if v not in visited]
        sub = w[np.ix_(visited, rest)]
        best = sub.min()
        v = rest[int(np.argmin(sub.min(axis=0)))]
        for u in visited:
            if w[u, v] <= best + margin:
                edges.add((min(u, v), max(u, v)))
        visited.append(v)
    if ip_rise is not None:
        edges.add((int(np.argmax(ip_rise)), n))
    return sorted(edges)


# --- template fitting -------------------------------------------------------

def _bounds(template, scale):
    return [(1e-12 / s, None) if pos else (None, 0.0) for pos, s in zip(template.positive, scale)]


def _param_scale(p0):
    # the optimizer works in units of the start values so its first step stays local
    return np.maximum(np.abs(p0), 1e-3 * np.abs(p0).max())


def _fit_cost(params, basis, targets, ratios):
    M = np.tensordot(params, basis, axes=1)
    Minv = np.linalg.inv(M)
    cost, grad_M = 0.0, np.zeros_like(M)
    grad_r = np.zeros(len(ratios))
    for k, (G, r) in enumerate(zip(targets, ratios)):
        R = Minv - G / r
        cost += float(np.sum(R * R))
        grad_M += -2.0 * Minv.T @ R @ Minv.T
        grad_r[k] = 2.0 * float(np.sum(R * G)) / r**2
    grad_p = np.tensordot(basis, grad_M, axes=([1, 2], [0, 1]))
    return cost, grad_p, grad_r


def _start_params(template, G):
    """Template parameters minimizing ||A_tilde G - I|| under the sign bounds.

    Linear in the parameters, so it has no local minima; the diagonal is
    lifted if the result is not positive definite.
    """
    basis = template.basis()
    n = len(G)
    design = np.stack([(Bk @ G).ravel() for Bk in basis], axis=1)
    lo = np.where(template.positive, 1e-12, -np.inf)
    hi = np.where(template.positive, np.inf, 0.0)
    p = lsq_linear(design, np.eye(n).ravel(), bounds=(lo, hi)).x
    low = np.linalg.eigvalsh(template.assemble(p))[0]
    if low <= 0:
        p = p + template.positive * (0.1 * p[template.positive].mean() - low)
    return p


def _minimize(fun, x0, bounds, max_iter):
    res = minimize(fun, x0, jac=True, method="L-BFGS-B", bounds=bounds,
                   options={"maxiter": max_iter, "ftol": 1e-16, "gtol": 1e-14, "maxcor": 30})
    # stopping on machine precision is fine; only the iteration cap counts as failure
    return res.x, res.fun, bool(res.success or res.nit < max_iter)


def _stable(A_tilde):
    return bool(np.linalg.eigvalsh(A_tilde)[0] > 0)


def fit_template(Y, Y0, template, max_iter=100_000, strict=False):
    """A_tilde following ``template`` whose inverse best matches the rise matrix."""
    G = rise_matrix(Y, Y0)
    if G.shape != template.groups.shape:
        raise ValueError("template size does not match the data")
    basis = template.basis()
    start = _start_params(template, G)
    sc = _param_scale(start)

    def fun(y):
        try:
            c, g, _ = _fit_cost(y * sc, basis, [G], [1.0])
        except np.linalg.LinAlgError:
            return 1e300, np.zeros_like(y)
        return c, g * sc

    y, cost, ok = _minimize(fun, start / sc, _bounds(template, sc), max_iter)
    params = y * sc
    A_tilde = template.assemble(params)
    ok = ok and _stable(A_tilde)
    if strict and not ok:
        raise NonConvergence(f"template fit stopped at residual {cost:.3g}")
    return FitResult(A_tilde, params, cost, ok)


def fit_multifreq(data, template, monotone=None, max_iter=100_000, strict=False):
    """Shared A_tilde and gamma ratios from rise data at several frequencies.

    ``data`` maps freq -> (Y, Y0); the first key is the base with ratio 1.
    ``monotone`` optionally forces the ratios to be "nondecreasing" or
    "nonincreasing" in frequency.
    """
    freqs = list(data)
    if not freqs:
        raise ValueError("no data")
    targets = {f: rise_matrix(*data[f]) for f in freqs}
    base = freqs[0]
    if len(freqs) == 1:
        return fit_template(*data[base], template, max_iter, strict)
    order = sorted(freqs)
    b = order.index(base)
    sign = {None: 0, "nondecreasing": 1.0, "nonincreasing": -1.0}[monotone]
    basis = template.basis()
    n_p = template.n_params

    def log_ratios(x):
        z = x[n_p:]
        out = np.zeros(len(order))
        if sign:
            for k in range(b + 1, len(order)):
                out[k] = out[k - 1] + sign * z[k - 1]
            for k in range(b - 1, -1, -1):
                out[k] = out[k + 1] - sign * z[k]
        else:
            others = [k for k in range(len(order)) if k != b]
            out[others] = z
        return out

    def chain(g_log):
        # gradient wrt z from gradient wrt log ratios (sorted order)
        if not sign:
            return np.delete(g_log, b)
        gz = np.zeros(len(order) - 1)
        for k in range(b + 1, len(order)):
            gz[k - 1] = sign * g_log[k:].sum()
        for k in range(b - 1, -1, -1):
            gz[k] = -sign * g_log[:k + 1].sum()
        return gz

    tlist = [targets[f] for f in order]
    p0 = _start_params(template, targets[base])
    sc = _param_scale(p0)

    def fun(x):
        lr = log_ratios(x)
        r = np.exp(lr)
        try:
            c, gp, gr = _fit_cost(x[:n_p] * sc, basis, tlist, r)
        except np.linalg.LinAlgError:
            return 1e300, np.zeros_like(x)
        return c, np.concatenate([gp * sc, chain(gr * r)])

    # start: least-squares scale of each rise matrix against the start inverse
    inv0 = np.linalg.inv(template.assemble(p0))
    scale = np.array([np.sum(targets[f] * inv0) for f in order]) / np.sum(targets[base] * inv0)
    lr0 = np.log(np.maximum(scale, 1e-12))
    if sign:
        z0 = [abs(lr0[k] - lr0[k - 1]) for k in range(b + 1, len(order))]
        z0 = [abs(lr0[k + 1] - lr0[k]) for k in range(b)] + z0
        zb = [(0.0, None)] * len(z0)
    else:
        z0 = list(np.delete(lr0, b))
        zb = [(None, None)] * len(z0)
    x, cost, ok = _minimize(fun, np.concatenate([p0 / sc, z0]), _bounds(template, sc) + zb,
                            max_iter)
    params = x[:n_p] * sc
    A_tilde = template.assemble(params)
    ok = ok and _stable(A_tilde)
    if strict and not ok:
        raise NonConvergence(f"multi-frequency fit stopped at residual {cost:.3g}")
    ratios = dict(zip(order, np.exp(log_ratios(x))))
    return FitResult(A_tilde, params, cost, ok, ratios={f: float(ratios[f]) for f in freqs})


def relative_power(gamma_ratio):
    """Dynamic power at each frequency relative to the base (gamma scales with power)."""
    return {f: float(r) for f, r in gamma_ratio.items()}


# --- transient calibration and prediction ----------------------------------

def _predict(A_tilde, gamma, chip, theta0, dt, mask):
    n = len(A_tilde)
    mp = MatrixThermalParams.from_matrices(-gamma * A_tilde, gamma * np.eye(n))
    return np.asarray(chip, dtype=float) + temp_const_power_matrix(theta0, dt, mp, mask_vector(mask, n))


def fit_gamma(trace, A_tilde, chip_offset, flat_tol=0.5, bracket=(1e-6, 1e3)):
    """Least-squares gamma for a trace with constant activity; returns (gamma, rmse)."""
    temps, t = trace.temps, trace.t
    if len(t) < 3:
        raise TooShort("need at least three samples")
    k = max(1, len(t) // 20)
    if np.max(np.abs(temps[:k].mean(axis=0) - temps[-k:].mean(axis=0))) < flat_tol:
        raise FlatTrace("trace does not move; no transient to fit")
    chip = np.asarray(chip_offset, dtype=float)
    n = len(A_tilde)
    mp_unit = MatrixThermalParams.from_matrices(-np.asarray(A_tilde, dtype=float), np.eye(n))
    theta0 = temps[0] - chip
    steady = mp_unit.steady(mask_vector(trace.mask, n))
    V, Vinv, lam = mp_unit.V, mp_unit.Vinv, mp_unit.D
    dt = t - t[0]
    w0 = Vinv @ (theta0 - steady)

    def rmse(log_g):
        decay = np.exp(np.outer(dt, lam) * np.exp(log_g))
        pred = chip + steady + (decay * w0) @ V.T
        return float(np.sqrt(np.mean((pred - temps) ** 2)))

    grid = np.linspace(np.log(bracket[0]), np.log(bracket[1]), 121)
    vals = [rmse(g) for g in grid]
    i = int(np.argmin(vals))
    lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, len(grid) - 1)]
    res = minimize_scalar(rmse, bounds=(lo, hi), method="bounded",
                          options={"xatol": 1e-12, "maxiter": 500})
    return float(np.exp(res.x)), float(res.fun)


def predict_temperature(result, mask, theta0=None, t0=0.0, t=np.inf, freq=None):
    """Core temperatures (deg C) at ``t`` with ``mask`` busy from ``t0``.

    ``theta0`` is the rise over the idle temperature at ``t0``.
    """
    freq = result.base_freq if freq is None else freq
    if freq not in result.gamma_ratio or freq not in result.chip_offset:
        raise UnknownFrequency(f"no calibration for frequency {freq}")
    ratio = result.gamma_ratio[freq]
    A_f = result.A_tilde / ratio
    n = len(A_f)
    theta0 = np.zeros(n) if theta0 is None else np.asarray(theta0, dtype=float)
    if t < t0:
        raise ValueError("t must be >= t0")
    if np.isinf(t):
        return result.chip_offset[freq] + np.linalg.solve(A_f, mask_vector(mask, n))
    return _predict(A_f, result.gamma * ratio, result.chip_offset[freq], theta0, t - t0, mask)


def estimate(profiles_by_freq, cooling, margin=0.5, shared_edges=False, monotone=None,
             base_freq=None, template=None):
    """Full pipeline: Y per frequency, floorplan, template fit, gamma from a cooling trace.

    A known ``template`` skips the floorplan step.
    """
    freqs = list(profiles_by_freq)
    if base_freq is not None:
        freqs.remove(base_freq)
        freqs.insert(0, base_freq)
    # least squares over every busy mask; equals the one-hot rows when only those exist
    data = {f: build_Y_ensemble(profiles_by_freq[f]) for f in freqs}
    base = freqs[0]
    Y, Y0 = data[base]
    if template is None:
        plan = estimate_floorplan(Y, Y0, margin)
        template = Template.from_adjacency(len(Y0), plan, shared=shared_edges)
    else:
        g = template.groups
        plan = [(i, j) for i, j in combinations(range(len(g)), 2) if g[i, j] >= 0]
    fit = fit_multifreq(data, template, monotone=monotone)
    ratios = fit.ratios or {base: 1.0}
    gamma, _ = fit_gamma(cooling, fit.A_tilde / ratios.get(cooling.freq, 1.0),
                         data.get(cooling.freq, data[base])[1])
    gamma_base = gamma / ratios.get(cooling.freq, 1.0)
    return EstimationResult(fit.A_tilde, gamma_base, base, ratios,
                            {f: data[f][1] for f in freqs}, template, plan)
