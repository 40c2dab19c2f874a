"""Benchmark systems, their theoretical causality maps, and map scoring.

``sim1`` is a trivariate TVARX system in which ``y`` drives ``x`` with an
oscillating strength and ``z`` drives ``x`` with a ramp-up/ramp-down strength.
``sim2`` is a chain ``x -> y -> z`` whose links are switched on in the first
and second half of each trial respectively.

The theoretical map freezes the true coefficients at each time and runs the
exact causality computation. The bivariate model that the conditional
measure needs is the exact reduced model of the frozen system, obtained from
the steady-state Kalman filter of its state-space form and written as a
(truncated, convergent) infinite-order VAR.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import solve_discrete_are

from .cgc import TFCGCMap, conditional_gc
from .tvarx import TrialSet

__all__ = [
    "ScenarioConfig",
    "TrueSystem",
    "MetricsReport",
    "DIRECTIONS",
    "gen_sim1",
    "gen_sim2",
    "generate",
    "reduced_model",
    "theoretical_tfcgc",
    "score",
]

CHANNELS = ("x", "y", "z")

# (source, target, condition) for every direction reported per scenario
DIRECTIONS = {
    "sim1": (("y", "x", "z"), ("z", "x", "y")),
    "sim2": (
        ("x", "y", "z"),
        ("y", "x", "z"),
        ("z", "x", "y"),
        ("x", "z", "y"),
        ("y", "z", "x"),
        ("z", "y", "x"),
    ),
}

NONZERO = {
    "sim1": (("y", "x", "z"), ("z", "x", "y")),
    "sim2": (("x", "y", "z"), ("y", "z", "x")),
}


@dataclass(frozen=True)
class ScenarioConfig:
    """Generator settings; use :meth:`default` for the benchmark values."""

    scenario: str
    n_samples: int
    n_trials: int
    fs: float = 200.0
    noise_var: tuple = (0.01, 0.01, 0.01)
    coupling: float = 0.5
    period: float = 2.0
    seed: int = 0
    burn_in: int = 200

    def __post_init__(self):
        if self.scenario not in ("sim1", "sim2"):
            raise ValueError(f"unknown scenario {self.scenario!r}")
        if self.n_samples < 1 or self.n_trials < 1:
            raise ValueError("sample and trial counts must be positive")
        if not self.fs > 0:
            raise ValueError("sampling rate must be positive")
        if len(self.noise_var) != 3 or min(self.noise_var) < 0:
            raise ValueError("three non-negative noise variances are required")
        object.__setattr__(self, "noise_var", tuple(float(v) for v in self.noise_var))

    @classmethod
    def default(cls, scenario, **overrides):
        base = {
            "sim1": dict(n_samples=2000, n_trials=20, noise_var=(0.01, 0.01, 0.001)),
            "sim2": dict(n_samples=1000, n_trials=20, noise_var=(0.01, 0.01, 0.01)),
        }
        if scenario not in base:
            raise ValueError(f"unknown scenario {scenario!r}")
        kw = dict(base[scenario])
        if "sigma2" in overrides:
            kw["noise_var"] = (float(overrides.pop("sigma2")),) * 3
        kw.update(overrides)
        return cls(scenario=scenario, **kw)

    def with_(self, **changes):
        return replace(self, **changes)


@dataclass
class TrueSystem:
    """Ground truth of a simulated record.

    ``coef[t - 1, out, src, lag - 1]`` over channels ``(x, y, z)``; ``profiles``
    holds the named coupling strengths.
    """

    channels: tuple
    coef: np.ndarray
    noise_cov: np.ndarray
    fs: float
    profiles: dict = field(default_factory=dict)

    def reordered(self, order):
        idx = [self.channels.index(c) for c in order]
        return TrueSystem(
            tuple(order),
            self.coef[:, idx][:, :, idx],
            self.noise_cov[np.ix_(idx, idx)],
            self.fs,
            self.profiles,
        )


def sim1_profiles(N, fs, coupling=0.5, period=2.0):
    """``a1``: sinusoid in ``[0, coupling]``; ``a2``: triangle peaking mid-record."""
    t = np.arange(1, N + 1, dtype=float)
    a1 = 0.5 * coupling * (1.0 + np.sin(2.0 * np.pi * t / (period * fs)))
    a2 = coupling * np.clip(1.0 - np.abs(2.0 * t / N - 1.0), 0.0, None)
    return a1, a2


def sim2_profiles(N, coupling=0.5):
    """``b1`` on during the first half, ``b2`` during the second half."""
    t = np.arange(1, N + 1)
    first = t <= N / 2
    return np.where(first, coupling, 0.0), np.where(first, 0.0, coupling)


def _simulate(coef, noise_var, cfg):
    # coef (N, 3, 3, 2); burn-in runs with the coefficients of t = 1
    N, W = cfg.n_samples, cfg.n_trials
    B = cfg.burn_in
    std = np.sqrt(np.asarray(noise_var))
    seeds = np.random.SeedSequence(cfg.seed).spawn(W)
    noise = np.stack(
        [np.random.default_rng(s).standard_normal((B + N, 3)) for s in seeds]
    ) * std
    full = np.concatenate([np.repeat(coef[:1], B, axis=0), coef], axis=0)
    v = np.zeros((W, B + N + 2, 3))  # two leading zeros as initial conditions
    for n in range(B + N):
        v[:, n + 2] = (
            v[:, n + 1] @ full[n, :, :, 0].T + v[:, n] @ full[n, :, :, 1].T + noise[:, n]
        )
    return v[:, 2 + B :]


def gen_sim1(config=None):
    """Generate the oscillating/ramp coupling benchmark.

    Returns
    -------
    data : TrialSet
    truth : TrueSystem
    """
    cfg = ScenarioConfig.default("sim1") if config is None else config
    N = cfg.n_samples
    a1, a2 = sim1_profiles(N, cfg.fs, cfg.coupling, cfg.period)
    coef = np.zeros((N, 3, 3, 2))
    coef[:, 0, 0] = (0.59, -0.2)
    coef[:, 0, 1, 0] = a1
    coef[:, 0, 2, 0] = a2
    coef[:, 1, 1] = (1.58, -0.96)
    coef[:, 2, 2] = (0.60, -0.91)
    data = TrialSet(CHANNELS, _simulate(coef, cfg.noise_var, cfg), cfg.fs)
    truth = TrueSystem(CHANNELS, coef, np.diag(cfg.noise_var), cfg.fs, {"a1": a1, "a2": a2})
    return data, truth


def gen_sim2(config=None):
    """Generate the switched chain ``x -> y -> z`` benchmark."""
    cfg = ScenarioConfig.default("sim2") if config is None else config
    N = cfg.n_samples
    b1, b2 = sim2_profiles(N, cfg.coupling)
    coef = np.zeros((N, 3, 3, 2))
    for c in range(3):
        coef[:, c, c] = (0.53, -0.8)
    coef[:, 1, 0, 0] = b1
    coef[:, 2, 1, 0] = b2
    data = TrialSet(CHANNELS, _simulate(coef, cfg.noise_var, cfg), cfg.fs)
    truth = TrueSystem(CHANNELS, coef, np.diag(cfg.noise_var), cfg.fs, {"b1": b1, "b2": b2})
    return data, truth


def generate(config):
    return (gen_sim1 if config.scenario == "sim1" else gen_sim2)(config)


def _riccati(F, H, Qs, Rs, Ss, tol=1e-14, max_iter=100000):
    # fixed-point iteration of the filtering Riccati equation
    P = Qs.copy()
    for _ in range(max_iter):
        Sig = H @ P @ H.T + Rs
        Kg = (F @ P @ H.T + Ss) @ np.linalg.inv(Sig)
        P_new = F @ P @ F.T + Qs - Kg @ Sig @ Kg.T
        if np.max(np.abs(P_new - P)) <= tol * max(1.0, np.max(np.abs(P))):
            return P_new
        P = P_new
    return P


def reduced_model(coef, noise_cov, keep, tol=1e-12, max_lag=5000):
    """Exact VAR representation of a subset of a stationary VAR's channels.

    Parameters
    ----------
    coef : ndarray of shape (k, k, L)
        ``v(t) = sum_i coef[:, :, i-1] v(t-i) + e(t)``.
    noise_cov : ndarray of shape (k, k)
    keep : sequence of int
        Channels of the reduced process, in output order.
    tol : float
        The infinite lag expansion is truncated once coefficient blocks fall
        below ``tol`` in max norm.

    Returns
    -------
    coef_r : ndarray of shape (m, m, L_r)
    cov_r : ndarray of shape (m, m)
        Innovation covariance of the reduced process.
    """
    coef = np.asarray(coef, dtype=float)
    Qn = np.asarray(noise_cov, dtype=float)
    keep = list(keep)
    k, _, L = coef.shape
    m = len(keep)
    A = np.concatenate([coef[:, :, i] for i in range(L)], axis=1)  # (k, kL)
    n = k * L
    F = np.zeros((n, n))
    F[:k] = A
    F[k:, :-k] = np.eye(n - k)
    Bm = np.zeros((n, k))
    Bm[:k] = np.eye(k)
    S = np.eye(k)[keep]
    H = S @ A
    Qs = Bm @ Qn @ Bm.T
    Rs = S @ Qn @ S.T
    Ss = Bm @ Qn @ S.T
    try:
        P = solve_discrete_are(F.T, H.T, Qs, Rs, s=Ss)
    except (np.linalg.LinAlgError, ValueError):
        P = _riccati(F, H, Qs, Rs, Ss)
    Sig = H @ P @ H.T + Rs
    Kg = (F @ P @ H.T + Ss) @ np.linalg.inv(Sig)
    Phi = F - Kg @ H
    blocks = []
    M = Kg.copy()
    small = 0
    for _ in range(max_lag):
        C = H @ M
        blocks.append(C)
        small = small + 1 if np.max(np.abs(C)) < tol else 0
        if small >= 3:
            break
        M = Phi @ M
    while len(blocks) > 1 and np.max(np.abs(blocks[-1])) < tol:
        blocks.pop()
    coef_r = np.stack(blocks, axis=-1)
    return coef_r, 0.5 * (Sig + Sig.T)


def _frozen_reduced(coef_t, noise_cov, keep):
    # coef_t (T, k, k, L); evaluate the reduced model once per distinct frozen system
    flat = coef_t.reshape(coef_t.shape[0], -1)
    uniq, inverse = np.unique(flat, axis=0, return_inverse=True)
    inverse = np.asarray(inverse).reshape(-1)
    models = [reduced_model(u.reshape(coef_t.shape[1:]), noise_cov, keep) for u in uniq]
    Lr = max(c.shape[-1] for c, _ in models)
    m = len(keep)
    coef_r = np.zeros((len(uniq), m, m, Lr))
    cov_r = np.zeros((len(uniq), m, m))
    for n, (c, s) in enumerate(models):
        coef_r[n, :, :, : c.shape[-1]] = c
        cov_r[n] = s
    return coef_r[inverse], cov_r[inverse]


def theoretical_tfcgc(truth, source, target, condition, times=None, freqs=None,
                      n_freqs=101):
    """Oracle ``GC_{source -> target | condition}`` from the true system.

    Parameters
    ----------
    truth : TrueSystem
    times : array_like of int, optional
        1-based sample indices; defaults to every sample.
    freqs : array_like, optional
        Defaults to ``n_freqs`` points on ``[0, fs/2]``.
    """
    sys3 = truth.reordered((target, source, condition))
    N = sys3.coef.shape[0]
    times = np.arange(1, N + 1) if times is None else np.asarray(times, dtype=int)
    if np.any(times < 1) or np.any(times > N):
        raise ValueError("grid times exceed the trajectory span")
    if freqs is None:
        freqs = np.linspace(0.0, truth.fs / 2, n_freqs)
    coef = sys3.coef[times - 1]
    cov3 = np.broadcast_to(sys3.noise_cov, (len(times), 3, 3))
    bi_coef, bi_cov = _frozen_reduced(coef, sys3.noise_cov, [0, 2])
    return conditional_gc(coef, cov3, bi_coef, bi_cov, freqs, truth.fs, times=times)


@dataclass
class MetricsReport:
    """Error of an estimated map against the oracle map."""

    mae: float
    rmse: float
    psnr: float
    n_times: int
    n_freqs: int
    peak: float

    def as_row(self):
        return {"MAE": self.mae, "RMSE": self.rmse, "PSNR": self.psnr}


def score(estimate, oracle, peak=None):
    """MAE, RMSE and PSNR of ``estimate`` against ``oracle``.

    ``peak`` is the MAX of the PSNR; it defaults to the oracle maximum. PSNR
    is infinite exactly when RMSE is zero.
    """
    est = estimate.gc if isinstance(estimate, TFCGCMap) else np.asarray(estimate, float)
    ref = oracle.gc if isinstance(oracle, TFCGCMap) else np.asarray(oracle, float)
    if est.shape != ref.shape:
        raise ValueError(f"grid mismatch: {est.shape} vs {ref.shape}")
    if isinstance(estimate, TFCGCMap) and isinstance(oracle, TFCGCMap):
        if not (np.array_equal(estimate.times, oracle.times)
                and np.allclose(estimate.freqs, oracle.freqs)):
            raise ValueError("estimate and oracle grids differ")
    err = est - ref
    mae = float(np.mean(np.abs(err)))
    scale = float(np.max(np.abs(err))) if err.size else 0.0
    rmse = scale * float(np.sqrt(np.mean((err / scale) ** 2))) if scale > 0 else 0.0
    # rounding may break the power-mean inequality in the last bit
    rmse = max(rmse, mae)
    peak = float(ref.max()) if peak is None else float(peak)
    if rmse == 0.0:
        psnr = float("inf")
    elif peak <= 0.0:
        psnr = float("-inf")
    else:
        psnr = 20.0 * np.log10(peak / rmse)
    return MetricsReport(mae, rmse, psnr, ref.shape[0], ref.shape[1], peak)
