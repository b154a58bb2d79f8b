"""Closed-form and numerical solutions of the linear RC thermal model.

Temperatures are rises over ambient (deg C) unless a name ends in ``_abs``.
Times are seconds.  The model is dtheta/dt = A theta + B P(t).
"""

from dataclasses import dataclass, field
import math

import numpy as np
from scipy.optimize import brentq

from .errors import ComplexEigen, DegenerateTarget, InfeasibleAmbient, SingularA

DEFAULT_TERMS = 500
EIG_IMAG_TOL = 1e-8


@dataclass(frozen=True)
class ScalarThermalParams:
    """Heating target ``alpha`` at full power and decay rate ``beta``.

    ``gamma`` holds symmetric conduction coefficients between nodes; the
    amplification factor ``lam`` is derived from it when given.
    """

    alpha: float
    beta: float
    gamma: np.ndarray | None = None
    lam: float | None = None

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be > 0")
        if not self.beta < 0:
            raise ValueError("beta must be < 0")
        lam = self.lam
        if self.gamma is not None:
            g = np.asarray(self.gamma, dtype=float)
            if g.ndim != 2 or g.shape[0] != g.shape[1]:
                raise ValueError("gamma must be square")
            if not np.allclose(g, g.T, atol=1e-12):
                raise ValueError("gamma must be symmetric")
            if np.any(np.diag(g) != 0):
                raise ValueError("gamma diagonal must be zero")
            if np.any(g < 0):
                raise ValueError("conduction coefficients must be >= 0")
            object.__setattr__(self, "gamma", g)
            derived = float(np.max(1.0 + g.sum(axis=1)))
            if lam is not None and abs(lam - derived) > 1e-9:
                raise ValueError(f"lam={lam} inconsistent with gamma (expected {derived})")
            lam = derived
        if lam is None:
            lam = 1.0
        if lam < 1:
            raise ValueError("lam must be >= 1")
        object.__setattr__(self, "lam", float(lam))


@dataclass(frozen=True)
class CoreModel:
    """Single-node LTI model dtheta/dt = a*theta + b*P."""

    a: float
    b: float

    def __post_init__(self):
        if not self.a < 0:
            raise ValueError("a must be < 0")
        if not self.b > 0:
            raise ValueError("b must be > 0")

    def steady(self, power):
        return -(self.b / self.a) * power

    def scalar_params(self, p_static, p_dynamic):
        return ScalarThermalParams(alpha=self.steady(p_static + p_dynamic), beta=self.a)


@dataclass(frozen=True)
class PeriodicPowerSignal:
    """Square wave: p_static always, plus p_dynamic during [offset, offset + util*period) mod period."""

    p_static: float
    p_dynamic: float
    util: float
    period: float
    offset: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.util <= 1.0:
            raise ValueError("util must be in [0, 1]")
        if not self.period > 0:
            raise ValueError("period must be > 0")
        if self.p_static < 0 or self.p_dynamic < 0:
            raise ValueError("powers must be >= 0")
        if self.offset < 0:
            raise ValueError("offset must be >= 0")

    @property
    def mean(self):
        return self.p_static + self.p_dynamic * self.util

    def power(self, t):
        phase = np.mod(np.asarray(t, dtype=float) - self.offset, self.period)
        on = phase < self.util * self.period
        return self.p_static + self.p_dynamic * on


@dataclass(frozen=True)
class MatrixThermalParams:
    A: np.ndarray
    B: np.ndarray
    V: np.ndarray
    D: np.ndarray
    chip_offset: np.ndarray = field(default=None)

    @property
    def n(self):
        return self.A.shape[0]

    @property
    def Vinv(self):
        return np.linalg.inv(self.V)

    @classmethod
    def from_matrices(cls, A, B, chip_offset=None):
        A = np.atleast_2d(np.asarray(A, dtype=float))
        n = A.shape[0]
        B = np.asarray(B, dtype=float)
        if B.ndim < 2:
            B = np.diag(np.broadcast_to(B, (n,)).astype(float))
        if A.shape != (n, n) or B.shape != (n, n):
            raise ValueError("A and B must be n x n")
        if np.any(np.diag(B) <= 0):
            raise ValueError("B diagonal entries must be > 0")
        w, V = np.linalg.eig(A)
        scale = max(np.linalg.norm(A), 1e-300)
        if np.max(np.abs(w.imag)) > EIG_IMAG_TOL * scale:
            raise ComplexEigen(f"eigenvalues with imaginary part: {w}")
        w = w.real
        V = np.real_if_close(V, tol=1e8).real
        if np.any(np.abs(w) <= 1e-14 * scale):
            raise SingularA("A has a zero eigenvalue")
        if np.any(w > 0):
            raise ValueError("A is unstable (positive eigenvalue)")
        order = np.argsort(-w)
        w, V = w[order], V[:, order]
        if np.linalg.cond(V) > 1e12:
            raise SingularA("A is not diagonalizable")
        if chip_offset is None:
            chip_offset = np.zeros(n)
        chip_offset = np.broadcast_to(np.asarray(chip_offset, dtype=float), (n,)).copy()
        return cls(A=A, B=B, V=V, D=w, chip_offset=chip_offset)

    def expm(self, dt):
        """e^{dt A} via the eigendecomposition."""
        return (self.V * np.exp(self.D * dt)) @ self.Vinv

    def reconstruction_error(self):
        R = (self.V * self.D) @ self.Vinv
        return np.linalg.norm(R - self.A) / np.linalg.norm(self.A)

    def steady(self, P):
        """Steady-state rise under constant power vector P."""
        return -np.linalg.solve(self.A, self.B @ np.asarray(P, dtype=float))


def temp_const_power(theta0, dt, p):
    return p.alpha + (theta0 - p.alpha) * math.exp(p.beta * dt)


def temp_cooling(theta0, dt, beta):
    return theta0 * math.exp(beta * dt)


def _series(beta, p_dyn, util, period, offset, t, terms):
    """Partial sums of the periodic particular solution, broadcast over beta and t."""
    k = np.arange(1, terms + 1, dtype=float)
    beta = np.asarray(beta, dtype=float)[..., None]
    shift = util * period / 2.0 + offset
    angle = 2.0 * np.pi * k * ((np.asarray(t, dtype=float)[..., None] - shift) / period)
    coef = 2.0 * p_dyn * period * np.sin(util * k * np.pi) / (
        k * np.pi * (period**2 * beta**2 + 4.0 * k**2 * np.pi**2))
    terms_ = coef * (-period * beta * np.cos(angle) + 2.0 * k * np.pi * np.sin(angle))
    return terms_.sum(axis=-1)


def fourier_S(beta, p_dyn, util, period, offset, t, terms=200):
    if terms < 1:
        raise ValueError("terms must be >= 1")
    return float(_series(beta, p_dyn, util, period, offset, t, terms))


def _sig_S(beta, sig, t, terms):
    return _series(beta, sig.p_dynamic, sig.util, sig.period, sig.offset, t, terms)


def temp_transient_single(theta0, t0, t, core, sig, terms=200):
    if t < t0:
        raise ValueError("t must be >= t0")
    decay = math.exp(core.a * (t - t0))
    s_t = _sig_S(core.a, sig, t, terms)
    s_0 = _sig_S(core.a, sig, t0, terms)
    return float(theta0 * decay + core.steady(sig.mean) * (1.0 - decay)
                 + core.b * (s_t - s_0 * decay))


def steady_band_single(core, sig):
    """(min, max, average) of the steady periodic orbit."""
    base = core.steady(sig.p_static)
    delta = core.steady(sig.p_dynamic)
    avg = core.steady(sig.mean)
    u, T, a = sig.util, sig.period, core.a
    if u >= 1.0 or u <= 0.0 or delta == 0.0:
        level = base + delta * (1.0 if u >= 1.0 else 0.0)
        return level, level, avg
    ratio = (1.0 - math.exp(a * u * T)) / (1.0 - math.exp(a * T))
    hi = base + delta * ratio
    lo = base + delta * math.exp(a * (1.0 - u) * T) * ratio
    return lo, hi, avg


def _peak_rise(util, period, core, p_static, p_dynamic):
    if util >= 1.0:
        return core.steady(p_static + p_dynamic)
    if util <= 0.0:
        return core.steady(p_static)
    ratio = (1.0 - math.exp(core.a * util * period)) / (1.0 - math.exp(core.a * period))
    return core.steady(p_static) + core.steady(p_dynamic) * ratio


def max_ambient_for_util(theta_max_abs, util, period, core, p_static, p_dynamic):
    """Highest ambient at which the steady peak under ``util`` just reaches theta_max_abs."""
    if not 0.0 <= util <= 1.0:
        raise ValueError("util must be in [0, 1]")
    return theta_max_abs - _peak_rise(util, period, core, p_static, p_dynamic)


def max_util_for_ambient(theta_max_abs, ambient, period, core, p_static, p_dynamic):
    headroom = theta_max_abs - ambient
    idle = core.steady(p_static)
    if headroom < idle:
        raise InfeasibleAmbient(
            f"idle steady rise {idle:.4g} exceeds headroom {headroom:.4g}")
    if p_dynamic == 0.0 or headroom >= core.steady(p_static + p_dynamic):
        return 1.0
    a, b, T = core.a, core.b, period
    x = headroom + (b / a) * p_static
    arg = 1.0 + (a / b) * (x / p_dynamic) * (1.0 - math.exp(a * T))
    return min(1.0, max(0.0, math.log(arg) / (a * T)))


def shifting_time(theta0, target_sig, core, terms=200, t0=0.0):
    """Time until the period-averaged temperature is within 1% of the new steady average."""
    target = core.steady(target_sig.mean)
    if target == 0.0:
        raise DegenerateTarget("target steady state is zero")
    gap = abs(theta0 - target - core.b * _sig_S(core.a, target_sig, t0, terms))
    if gap == 0.0:
        return 0.0
    return max(0.0, math.log(0.01 * abs(target) / gap) / core.a)


def _as_mp(mp):
    if isinstance(mp, MatrixThermalParams):
        return mp
    if isinstance(mp, CoreModel):
        return MatrixThermalParams.from_matrices([[mp.a]], [[mp.b]])
    raise TypeError("expected MatrixThermalParams or CoreModel")


def temp_multicore(theta0, t0, t, mp, sigs, terms=200):
    """Closed-form response of n nodes driven by independent periodic signals."""
    mp = _as_mp(mp)
    if t < t0:
        raise ValueError("t must be >= t0")
    if len(sigs) != mp.n:
        raise ValueError("need one signal per node")
    theta0 = np.broadcast_to(np.asarray(theta0, dtype=float), (mp.n,))
    dt = t - t0
    E = mp.expm(dt)
    p_mean = np.array([s.mean for s in sigs])
    const = -np.linalg.solve(mp.A, (np.eye(mp.n) - E) @ (mp.B @ p_mean))
    W = mp.Vinv @ mp.B
    S_t = np.column_stack([_sig_S(mp.D, s, t, terms) for s in sigs])
    S_0 = np.column_stack([_sig_S(mp.D, s, t0, terms) for s in sigs])
    z_t = (W * S_t).sum(axis=1)
    z_0 = (W * S_0).sum(axis=1)
    osc = mp.V @ (z_t - np.exp(mp.D * dt) * z_0)
    return E @ theta0 + const + osc


def temp_const_power_matrix(theta0, dt, mp, P):
    E = mp.expm(dt)
    ss = mp.steady(P)
    return E @ (np.asarray(theta0, dtype=float) - ss) + ss


def superpose(resp_a, resp_b):
    return np.asarray(resp_a, dtype=float) + np.asarray(resp_b, dtype=float)


def ode_oracle(theta0, t0, t, mp, power_fn, step):
    """Fixed-step classical RK4 integration of dtheta/dt = A theta + B P(t)."""
    if step <= 0:
        raise ValueError("step must be > 0")
    if isinstance(mp, CoreModel):
        A, B = np.array([[mp.a]]), np.array([[mp.b]])
    else:
        A, B = mp.A, mp.B
    y = np.array(np.atleast_1d(theta0), dtype=float)
    n_steps = max(1, int(math.ceil((t - t0) / step - 1e-9)))
    h = (t - t0) / n_steps

    def f(s, v):
        return A @ v + B @ np.atleast_1d(power_fn(s))

    s = t0
    for k in range(n_steps):
        k1 = f(s, y)
        k2 = f(s + h / 2, y + h / 2 * k1)
        k3 = f(s + h / 2, y + h / 2 * k2)
        k4 = f(s + h, y + h * k3)
        y = y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        s = t0 + (k + 1) * h
    return y


def evolve_segments(theta0, durations, powers, mp):
    """Exact response to piecewise-constant power, segment by segment.

    ``durations[k]`` seconds of constant power vector ``powers[k]``.  Returns
    (temperatures at the k+1 boundaries, per-segment per-node peak, offset of
    each peak inside its segment).
    """
    mp = _as_mp(mp)
    theta = np.array(np.broadcast_to(np.asarray(theta0, dtype=float), (mp.n,)))
    m = len(durations)
    temps = np.empty((m + 1, mp.n))
    temps[0] = theta
    seg_peak = np.empty((m, mp.n))
    seg_t = np.zeros((m, mp.n))
    Vinv = mp.Vinv
    P = np.atleast_2d(np.asarray(powers, dtype=float))
    if m and P.shape[0] == 1 and m > 1:
        P = np.repeat(P, m, axis=0)
    steady = -np.linalg.solve(mp.A, mp.B @ P.T).T if m else P
    for k in range(m):
        dt = durations[k]
        ss = steady[k]
        coeff = mp.V * (Vinv @ (theta - ss))   # node i = sum_j coeff[i,j] e^{D_j s} + ss_i
        end = coeff @ np.exp(mp.D * dt) + ss
        seg_peak[k] = np.maximum(theta, end)
        seg_t[k] = np.where(end > theta, dt, 0.0)
        if mp.n > 1:
            for i in range(mp.n):
                for s, val in _segment_extrema(coeff[i], mp.D, ss[i], dt):
                    if val > seg_peak[k, i]:
                        seg_peak[k, i], seg_t[k, i] = val, s
        theta = end
        temps[k + 1] = theta
    return temps, seg_peak, seg_t


def evolve_piecewise(theta0, durations, powers, mp):
    """Like ``evolve_segments`` but returns (boundary temps, overall peak, peak time)."""
    temps, seg_peak, seg_t = evolve_segments(theta0, durations, powers, mp)
    starts = np.concatenate([[0.0], np.cumsum(durations)])
    peak = temps[0].copy()
    peak_t = np.zeros(len(peak))
    if len(durations):
        idx = np.argmax(seg_peak, axis=0)
        for i, k in enumerate(idx):
            if seg_peak[k, i] > peak[i]:
                peak[i] = seg_peak[k, i]
                peak_t[i] = starts[k] + seg_t[k, i]
    return temps, peak, peak_t


def _segment_extrema(c, lam, ss, dt, grid=32):
    """Interior maxima of ss + sum_k c_k e^{lam_k s} on (0, dt)."""
    if dt <= 0 or np.count_nonzero(np.abs(c) > 1e-15) < 2:
        return []

    def deriv(s):
        return float(np.sum(c * lam * np.exp(lam * s)))

    xs = np.linspace(0.0, dt, grid + 1)
    ds = [deriv(x) for x in xs]
    found = []
    for x0, x1, d0, d1 in zip(xs[:-1], xs[1:], ds[:-1], ds[1:]):
        if d0 > 0 and d1 < 0:
            s = brentq(deriv, x0, x1)
            found.append((s, ss + float(np.sum(c * np.exp(lam * s)))))
    return found
