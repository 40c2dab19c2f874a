"""End-to-end estimation: fit TVARX systems, build maps, test significance.

A :class:`SystemFit` owns one trial set and one estimator. It fits any
equation on demand and caches the result, so the bivariate and trivariate
models of several directions share work. For the B-spline estimators every
equation is a column subset of one design, so a single pass over the trials
yields all the normal equations.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from .basis import build_dictionary, build_test_bank
from .cgc import conditional_gc, covariance_track, frequency_grid
from .selection import (
    CoefficientTrajectories,
    SelectionConfig,
    forward_select,
    recover_coefficients,
    rls_fit,
)
from .simkit import DIRECTIONS, generate, score, theoretical_tfcgc
from .tvarx import Design, ModelSpec, NormalEquations, TrialSet, modulate_block

logger = logging.getLogger(__name__)

__all__ = [
    "ESTIMATORS",
    "PipelineConfig",
    "VarFit",
    "SystemFit",
    "estimate_tfcgc",
    "significance_threshold",
    "surrogate_maxima",
    "surrogate_maxima_multi",
    "empirical_quantile",
    "run_bench",
]

ESTIMATORS = ("rls", "ols", "rols", "urols")
RLS_FORGETTING = {"sim1": 0.94, "sim2": 0.90}


@dataclass(frozen=True)
class PipelineConfig:
    """Every numeric knob of the estimation pipeline."""

    estimator: str = "urols"
    orders: tuple = (3, 4, 5, 6)
    scale: int = 4
    lags: int = 2
    bivariate_lags: int | None = None
    d: int = 2
    n0: int = 20
    mu: float | None = None
    mu_scale: float = 1e-2
    v: float = 3.0
    max_terms: int | None = None
    rank_tol: float = 1e-10
    forgetting: float = 0.94
    rls_delta: float = 1e3
    rho: float = 0.05
    n_init: int = 50
    n_freqs: int = 101
    cond_cap: float = 1e12

    def __post_init__(self):
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"estimator must be one of {ESTIMATORS}")
        object.__setattr__(self, "orders", tuple(int(r) for r in self.orders))
        if self.lags < 1 or (self.bivariate_lags is not None and self.bivariate_lags < 1):
            raise ValueError("lags must be >= 1")

    @property
    def biv_lags(self):
        return self.lags if self.bivariate_lags is None else self.bivariate_lags

    @property
    def start(self):
        return max(self.lags, self.biv_lags) + 1

    def selection(self):
        return SelectionConfig(
            variant=self.estimator, mu=self.mu, mu_scale=self.mu_scale, v=self.v,
            max_terms=self.max_terms, rank_tol=self.rank_tol,
        )

    def replace(self, **changes):
        return replace(self, **changes)

    def as_dict(self):
        return asdict(self)

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


@dataclass
class VarFit:
    """A fitted multivariate model on the rows ``t >= start``.

    ``coef`` spans all samples ``(N, k, k, L)``; ``residuals`` is
    ``(n_trials, N - start + 1, k)`` and ``cov`` the matching covariance track.
    """

    channels: tuple
    coef: np.ndarray
    residuals: np.ndarray
    cov: np.ndarray
    start: int
    models: dict


class SystemFit:
    """Lazily fitted equations of one estimator on one trial set."""

    def __init__(self, data, config=None):
        self.data = data
        self.config = PipelineConfig() if config is None else config
        cfg = self.config
        self.dictionary = build_dictionary(cfg.orders, cfg.scale)
        self.bank = build_test_bank(cfg.d, cfg.n0) if cfg.estimator == "urols" else None
        self.start = cfg.start
        self._design = None
        self._normal = None
        self._eqs = {}
        self._engines = {}

    @property
    def design(self):
        if self._design is None:
            self._design = Design(self.data, self.dictionary, self.start - 1, self.bank)
        return self._design

    @property
    def normal(self):
        if self._normal is None:
            self._normal = self.design.normal_equations()
        return self._normal

    def equation(self, output, sources, lags):
        """Coefficient trajectories of one equation (cached).

        Fits are shared between permutations of the same source set.
        """
        sources = tuple(sources)
        canon = tuple(sorted(sources, key=self.data.index))
        key = (output, canon, int(lags))
        if key not in self._eqs:
            self._eqs[key] = self._fit(output, canon, lags)
        traj, model = self._eqs[key]
        if canon != sources:
            order = [canon.index(s) for s in sources]
            traj = CoefficientTrajectories(output, sources, traj.values[:, order])
        return traj, model

    def _fit(self, output, sources, lags):
        spec = ModelSpec(output, sources, lags)
        if self.config.estimator == "rls":
            traj = rls_fit(self.data, spec, self.config.forgetting,
                           delta=self.config.rls_delta, start=self.start)
            model = None
        else:
            sub = self.normal.subproblem(
                self.design.columns(spec), self.data.index(output)
            )
            model = forward_select(sub, self.config.selection())
            traj = recover_coefficients(model, self.dictionary, spec, self.data.n_samples)
        return traj, model

    def var(self, channels, lags=None):
        """Fit every equation of the VAR over ``channels``."""
        lags = self.config.lags if lags is None else lags
        return assemble_var(
            self.data, channels, [self.equation(c, channels, lags) for c in channels],
            self.start, self.config,
        )


def assemble_var(data, channels, eqs, start, config):
    channels = tuple(channels)
    k = len(channels)
    L = max(traj.max_lag for traj, _ in eqs)
    coef = np.zeros((data.n_samples, k, k, L))
    res = np.empty((data.n_trials, data.n_samples - start + 1, k))
    for a, (traj, _) in enumerate(eqs):
        coef[:, a, :, : traj.max_lag] = traj.values
        res[:, :, a] = data.signal(channels[a])[:, start - 1 :] - traj.predict(data, start)
    cov = covariance_track(res, config.rho, config.n_init)
    models = {c: m for c, (_, m) in zip(channels, eqs)}
    return VarFit(channels, coef, res, cov, start, models)


def _map_from_fits(tri, bi, data, config):
    s = tri.start
    times = np.arange(s, data.n_samples + 1)
    freqs = frequency_grid(data.fs, config.n_freqs)
    return conditional_gc(
        tri.coef[s - 1 :], tri.cov, bi.coef[s - 1 :], bi.cov, freqs, data.fs,
        times=times, cond_cap=config.cond_cap,
    )


def estimate_tfcgc(data, source, target, condition, config=None, system=None):
    """Estimate ``GC_{source -> target | condition}(t, f)`` from data.

    Parameters
    ----------
    data : TrialSet
    source, target, condition : str
        Distinct channel names.
    config : PipelineConfig, optional
    system : SystemFit, optional
        Reuse fits across directions.

    Returns
    -------
    TFCGCMap
        Rows cover samples ``start..N``; no threshold is attached.
    """
    if len({source, target, condition}) != 3:
        raise ValueError("source, target and condition must be distinct channels")
    for c in (source, target, condition):
        data.index(c)
    system = SystemFit(data, config) if system is None else system
    cfg = system.config
    tri = system.var((target, source, condition), cfg.lags)
    bi = system.var((target, condition), cfg.biv_lags)
    return _map_from_fits(tri, bi, data, cfg)


def _derangement(rng, n):
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == np.arange(n)):
            return perm


def empirical_quantile(values, alpha):
    """The ``ceil((1 - alpha)(n + 1))``-th smallest of ``n`` surrogate values."""
    vals = np.sort(np.asarray(values, dtype=float))
    n = len(vals)
    k = math.ceil((1.0 - alpha) * (n + 1) - 1e-9)
    if k > n:
        raise ValueError(f"{n} surrogates cannot resolve alpha={alpha}")
    return float(vals[k - 1])


class _CrossEngine:
    """Gram matrices of trial-permuted data without refitting from scratch.

    Only blocks that pair the source channel with the other channels change
    when the source's trials are permuted; these are sums of trial-pair
    cross products, which are computed once.
    """

    def __init__(self, system, source):
        design = system.design
        data = system.data
        self.labels = list(design.labels)
        C = len(data.channels)
        p = len(self.labels)
        s_out = data.index(source)
        s_cols = [n for n, lab in enumerate(self.labels) if lab[0] == source]
        o_cols = [n for n, lab in enumerate(self.labels) if lab[0] != source]
        # Z = [Phi | X]: design columns followed by one column per channel
        self.zs = np.array(s_cols + [p + s_out])
        self.zo = np.array(o_cols + [p + c for c in range(C) if c != s_out])
        W = data.n_trials
        full = np.zeros((p + C, p + C))
        zs_blocks, zo_blocks = [], []
        n_rows = 0
        for w in range(W):
            Phi, X = design.trial_block(data, w)
            Z = np.concatenate([Phi, X], axis=1)
            if system.bank is not None:
                Z = np.concatenate([Z, modulate_block(Z, system.bank)], axis=0)
            full += Z.T @ Z
            n_rows += Z.shape[0]
            zs_blocks.append(Z[:, self.zs])
            zo_blocks.append(Z[:, self.zo])
        zs_all = np.concatenate(zs_blocks, axis=1)  # (rows, W * ns)
        no, ns = len(self.zo), len(self.zs)
        self.cross = np.empty((W, W, no, ns))
        for w in range(W):
            self.cross[w] = (zo_blocks[w].T @ zs_all).reshape(no, W, ns).transpose(1, 0, 2)
        self.full = full
        self.n_rows = n_rows
        self.p = p
        self.C = C

    @staticmethod
    def nbytes(system, source):
        W = system.data.n_trials
        C = len(system.data.channels)
        per = len(system.dictionary) * system.design.max_lag
        return 8 * W * W * (per + 1) * ((C - 1) * (per + 1))

    def normal_equations(self, perm):
        Zg = self.full.copy()
        block = self.cross[np.arange(len(perm)), perm].sum(axis=0)
        Zg[np.ix_(self.zo, self.zs)] = block
        Zg[np.ix_(self.zs, self.zo)] = block.T
        p, C = self.p, self.C
        # the chosen row set is folded into the first slot
        return NormalEquations(
            Zg[:p, :p], Zg[:p, p:], np.diag(Zg)[p:].copy(), self.n_rows,
            np.zeros((p, p)), np.zeros((p, C)), np.zeros(C), 0, self.labels,
        )


CROSS_BUDGET = 1 << 30  # bytes allowed for the trial-pair cross products


def _permuted(data, channel, perm):
    arr = data.data.copy()
    c = data.index(channel)
    arr[:, :, c] = data.data[perm, :, c]
    return TrialSet(data.channels, arr, data.fs)


def _reorder(fit, channels):
    order = [fit.channels.index(c) for c in channels]
    ix = np.ix_(order, order)
    return VarFit(
        tuple(channels), fit.coef[:, order][:, :, order], fit.residuals[:, :, order],
        fit.cov[(slice(None),) + ix], fit.start, fit.models,
    )


def _engine(system, source):
    engines = system._engines
    if source not in engines:
        if _CrossEngine.nbytes(system, source) > CROSS_BUDGET:
            engines[source] = None
        else:
            engines[source] = _CrossEngine(system, source)
    return engines[source]


def _surrogate_fit(system, sdata, source, channels, perm):
    cfg = system.config
    if cfg.estimator == "rls":
        eqs = [
            (rls_fit(sdata, ModelSpec(c, channels, cfg.lags), cfg.forgetting,
                     delta=cfg.rls_delta, start=system.start), None)
            for c in channels
        ]
        return assemble_var(sdata, channels, eqs, system.start, cfg)
    engine = _engine(system, source)
    if engine is None:
        ne = system.design.normal_equations(sdata)
    else:
        ne = engine.normal_equations(perm)
    eqs = []
    for c in channels:
        spec = ModelSpec(c, channels, cfg.lags)
        sub = ne.subproblem(system.design.columns(spec), sdata.index(c))
        model = forward_select(sub, cfg.selection())
        traj = recover_coefficients(model, system.dictionary, spec, sdata.n_samples)
        eqs.append((traj, model))
    return assemble_var(sdata, channels, eqs, system.start, cfg)


def surrogate_maxima_multi(system, source, pairs, n_perm=99, seed=0, threads=1):
    """Surrogate maxima for several ``(target, condition)`` pairs of one source.

    Every pair sees the same permutations, so pairs whose trivariate models
    span the same channels share one refit per surrogate.

    Returns
    -------
    dict
        ``(target, condition) -> ndarray of n_perm maxima``.
    """
    data = system.data
    if n_perm < 1:
        raise ValueError("at least one permutation is required")
    if data.n_trials < 2:
        raise ValueError("trial permutation needs at least two trials")
    cfg = system.config
    pairs = [tuple(p) for p in pairs]
    bis = {p: system.var(p, cfg.biv_lags) for p in pairs}
    seqs = np.random.SeedSequence(seed).spawn(n_perm)
    perms = [_derangement(np.random.default_rng(s), data.n_trials) for s in seqs]

    def one(perm):
        sdata = _permuted(data, source, perm)
        fits = {}
        out = []
        for target, condition in pairs:
            key = frozenset((target, source, condition))
            if key not in fits:
                canon = tuple(sorted(key, key=data.index))
                fits[key] = _surrogate_fit(system, sdata, source, canon, perm)
            tri = _reorder(fits[key], (target, source, condition))
            gc = _map_from_fits(tri, bis[(target, condition)], sdata, cfg).gc
            out.append(float(gc.max()))
        return out

    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(one, perms))
    else:
        rows = [one(p) for p in perms]
    arr = np.asarray(rows).reshape(n_perm, len(pairs))
    return {p: arr[:, n] for n, p in enumerate(pairs)}


def surrogate_maxima(data, source, target, condition, config=None, n_perm=99, seed=0,
                     threads=1, system=None):
    """Maximum surrogate GC over the grid for ``n_perm`` trial permutations.

    Each surrogate re-pairs the trials of ``source`` with those of the other
    channels by a random derangement, which destroys cross-channel coupling
    and keeps every channel's own dynamics. The bivariate model excludes the
    source, so only the trivariate model is refitted.
    """
    system = SystemFit(data, config) if system is None else system
    res = surrogate_maxima_multi(system, source, [(target, condition)], n_perm, seed, threads)
    return res[(target, condition)]


def _check_significance_args(n_perm, alpha):
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    if n_perm < 1:
        raise ValueError("at least one permutation is required")
    if n_perm < 1.0 / alpha - 1.0 - 1e-9:
        raise ValueError(f"n_perm={n_perm} is too small for alpha={alpha}")


def significance_threshold(data, source, target, condition, config=None, n_perm=999,
                           alpha=0.01, seed=0, threads=1, system=None):
    """Family-wise significance threshold from trial-permutation surrogates.

    Returns the ``(1 - alpha)`` empirical quantile of the surrogate maxima.
    """
    _check_significance_args(n_perm, alpha)
    maxima = surrogate_maxima(data, source, target, condition, config, n_perm, seed,
                              threads, system)
    return empirical_quantile(maxima, alpha)


def run_bench(scenario, estimators=ESTIMATORS, config=None, significance=True,
              n_perm=99, alpha=0.01, threads=1, data=None, oracles=None):
    """Score every estimator on every direction of a benchmark scenario.

    Parameters
    ----------
    scenario : ScenarioConfig
    estimators : sequence of str
    config : PipelineConfig, optional
        Shared settings; the estimator field is overridden per row. The
        default uses the scenario's RLS forgetting factor.
    significance : bool
        Score thresholded maps (non-significant cells set to zero).
    oracles : dict, optional
        Precomputed oracle maps keyed by direction.

    Returns
    -------
    list of dict
        One row per (direction, estimator) with MAE, RMSE and PSNR. PSNR uses
        the largest oracle value over all directions of the scenario as MAX.
    """
    if config is None:
        config = PipelineConfig(forgetting=RLS_FORGETTING[scenario.scenario])
    base = config
    if data is None:
        data, truth = generate(scenario)
    else:
        truth = None
    directions = DIRECTIONS[scenario.scenario]
    times = np.arange(base.start, scenario.n_samples + 1)
    freqs = frequency_grid(scenario.fs, base.n_freqs)
    if oracles is None:
        if truth is None:
            _, truth = generate(scenario)
        oracles = {
            d: theoretical_tfcgc(truth, *d, times=times, freqs=freqs) for d in directions
        }
    peak = max(float(m.gc.max()) for m in oracles.values())
    rows = []
    for est in estimators:
        cfg = base.replace(estimator=est)
        system = SystemFit(data, cfg)
        thresholds = {}
        if significance:
            _check_significance_args(n_perm, alpha)
            for source in dict.fromkeys(d[0] for d in directions):
                pairs = [(d[1], d[2]) for d in directions if d[0] == source]
                maxima = surrogate_maxima_multi(system, source, pairs, n_perm,
                                                scenario.seed, threads)
                for (target, condition), vals in maxima.items():
                    thresholds[(source, target, condition)] = empirical_quantile(vals, alpha)
        for d in directions:
            m = estimate_tfcgc(data, *d, system=system)
            thr = thresholds.get(d)
            est_map = m.gc if thr is None else m.with_threshold(thr).thresholded()
            rep = score(est_map, oracles[d], peak=peak)
            rows.append(
                dict(direction=f"{d[0]}->{d[1]}|{d[2]}", estimator=est, MAE=rep.mae,
                     RMSE=rep.rmse, PSNR=rep.psnr, threshold=thr)
            )
    return rows
