"""TVARX regression problems built on a multiwavelet dictionary.

A TVARX equation with output ``x`` and sources ``s_1, ..., s_V`` is expanded as

    x(t) = sum_{n, i, m} alpha_{n,i,m} * xi_m(t / N) * s_n(t - i) + e(t),

which is linear in the time-invariant ``alpha``. Each candidate column is a
lagged signal multiplied by one wavelet atom. The ultra least squares (ULS)
problem appends, per trial, ``d`` blocks of rows in which the output and every
column are correlated with the normalised test-function derivatives.

Trials are stacked as independent row blocks that share one coefficient
vector; modulation never runs across a trial boundary.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "TrialSet",
    "ModelSpec",
    "ULSProblem",
    "NormalEquations",
    "Design",
    "expand_regressors",
    "modulate",
    "modulate_block",
]


@dataclass
class TrialSet:
    """Multi-trial multichannel recording.

    Parameters
    ----------
    channels : sequence of str
        Channel names, in column order of ``data``.
    data : array_like of shape (n_trials, n_samples, n_channels)
        Real-valued samples; a 2-D array is treated as a single trial.
    fs : float
        Sampling rate in Hz.
    """

    channels: tuple
    data: np.ndarray
    fs: float

    def __post_init__(self):
        self.channels = tuple(str(c) for c in self.channels)
        data = np.asarray(self.data, dtype=float)
        if data.ndim == 2:
            data = data[None]
        if data.ndim != 3:
            raise ValueError("data must have shape (n_trials, n_samples, n_channels)")
        if data.shape[2] != len(self.channels):
            raise ValueError(
                f"{len(self.channels)} channel names for {data.shape[2]} columns"
            )
        if len(set(self.channels)) != len(self.channels):
            raise ValueError("channel names must be unique")
        if not self.fs > 0:
            raise ValueError("sampling rate must be positive")
        self.data = data
        self.fs = float(self.fs)

    @property
    def n_trials(self):
        return self.data.shape[0]

    @property
    def n_samples(self):
        return self.data.shape[1]

    def index(self, channel):
        try:
            return self.channels.index(channel)
        except ValueError:
            raise KeyError(f"unknown channel {channel!r}") from None

    def signal(self, channel):
        """Return the ``(n_trials, n_samples)`` array of one channel."""
        return self.data[:, :, self.index(channel)]

    def select(self, channels):
        idx = [self.index(c) for c in channels]
        return TrialSet(tuple(channels), self.data[:, :, idx], self.fs)


@dataclass(frozen=True)
class ModelSpec:
    """One TVARX equation: an output channel regressed on lagged sources.

    ``sources`` must contain the output so the autoregressive part is present;
    ``lags[n]`` is the maximum lag used for ``sources[n]``.
    """

    output: str
    sources: tuple
    lags: tuple

    def __post_init__(self):
        object.__setattr__(self, "sources", tuple(self.sources))
        lags = self.lags
        if np.isscalar(lags):
            lags = (int(lags),) * len(self.sources)
        object.__setattr__(self, "lags", tuple(int(v) for v in lags))
        if len(self.lags) != len(self.sources):
            raise ValueError("one maximum lag per source is required")
        if any(v < 1 for v in self.lags):
            raise ValueError("lags must be >= 1")
        if self.output not in self.sources:
            raise ValueError("the output channel must be among the sources")

    @property
    def max_lag(self):
        return max(self.lags)

    def terms(self):
        """``(source, lag)`` pairs in column order."""
        return [(s, i) for s, L in zip(self.sources, self.lags) for i in range(1, L + 1)]


def _lagged(signal, lags, start):
    # signal (..., N); returns (..., N - start + 1, len(lags)) for t = start..N
    N = signal.shape[-1]
    return np.stack([signal[..., start - 1 - i : N - i] for i in lags], axis=-1)


def expand_regressors(data, spec, dictionary, start=None):
    """Build the candidate matrix of the expanded model.

    Parameters
    ----------
    data : TrialSet
    spec : ModelSpec
    dictionary : BasisDictionary
    start : int, optional
        First (1-based) sample used as a regression row. Defaults to
        ``spec.max_lag + 1``; a larger value aligns models with different lag
        orders.

    Returns
    -------
    Phi : ndarray of shape (n_trials, N - start + 1, n_terms * M)
        Column ``(n, i, m)`` holds ``xi_m(t/N) * s_n(t - i)``.
    labels : list of (str, int, int)
        ``(source, lag, atom index)`` per column.
    """
    N = data.n_samples
    start = spec.max_lag + 1 if start is None else int(start)
    if start <= spec.max_lag:
        raise ValueError("start must exceed the maximum lag")
    if start > N:
        raise ValueError(f"maximum lag {spec.max_lag} leaves no data in {N} samples")
    atoms = dictionary.evaluate(N)[start - 1 :]
    blocks, labels = [], []
    for src, L in zip(spec.sources, spec.lags):
        lagged = _lagged(data.signal(src), range(1, L + 1), start)
        blocks.append(np.einsum("wti,tm->wtim", lagged, atoms))
        labels.extend((src, i, m) for i in range(1, L + 1) for m in range(atoms.shape[1]))
    Phi = np.concatenate(blocks, axis=2).reshape(data.n_trials, N - start + 1, -1)
    return Phi, labels


def modulate_block(block, bank):
    """Correlate a per-trial block with every normalised derivative.

    ``block`` has shape ``(n_eff, ...)``; the result stacks ``d`` blocks of
    ``n_eff - n0`` rows, row ``p`` being ``sum_tau block[p + tau] * w[tau]``.
    """
    block = np.asarray(block, dtype=float)
    n_eff, n0 = block.shape[0], bank.support
    if n0 >= n_eff:
        raise ValueError(f"test-function support {n0} >= effective length {n_eff}")
    windows = sliding_window_view(block, n0, axis=0)[: n_eff - n0]
    out = np.tensordot(windows, bank.derivatives, axes=([-1], [1]))
    # (rows, ..., d) -> (d * rows, ...)
    out = np.moveaxis(out, -1, 0)
    return out.reshape((-1,) + block.shape[1:])


@dataclass
class NormalEquations:
    """Inner products that fully determine a forward-regression run.

    The raw (time-domain) and modulated row blocks are kept apart so that
    one accumulation serves both the plain and the ultra least squares
    criteria.
    """

    gram_raw: np.ndarray
    rhs_raw: np.ndarray
    xx_raw: float
    n_raw: int
    gram_mod: np.ndarray
    rhs_mod: np.ndarray
    xx_mod: float
    n_mod: int
    labels: list = field(default_factory=list)

    def combined(self, augmented=True):
        """Return ``(gram, rhs, xx, n_rows)`` for the chosen row set."""
        if augmented:
            return (
                self.gram_raw + self.gram_mod,
                self.rhs_raw + self.rhs_mod,
                self.xx_raw + self.xx_mod,
                self.n_raw + self.n_mod,
            )
        return self.gram_raw, self.rhs_raw, self.xx_raw, self.n_raw

    @property
    def n_candidates(self):
        return self.gram_raw.shape[0]

    def subproblem(self, columns, output=None):
        """Restrict to candidate ``columns`` and, for multi-output sums, one output."""
        cols = np.asarray(columns, dtype=int)
        ix = np.ix_(cols, cols)

        def pick(rhs, xx):
            if rhs.ndim == 1:
                return rhs[cols], float(xx)
            return rhs[cols, output], float(xx[output])

        rr, xr = pick(self.rhs_raw, self.xx_raw)
        rm, xm = pick(self.rhs_mod, self.xx_mod)
        return NormalEquations(
            self.gram_raw[ix], rr, xr, self.n_raw,
            self.gram_mod[ix], rm, xm, self.n_mod,
            [self.labels[c] for c in cols] if self.labels else [],
        )


@dataclass
class ULSProblem:
    """Explicit ULS regression ``X = Phi @ theta``.

    Rows are grouped per trial as ``[raw block, d modulated blocks]``;
    ``raw_rows`` marks the unmodulated rows.
    """

    X: np.ndarray
    Phi: np.ndarray
    labels: list
    start: int
    raw_rows: np.ndarray
    n_trials: int = 1

    @property
    def n_rows(self):
        return self.X.shape[0]

    def raw(self):
        """The plain least-squares problem on unmodulated rows only."""
        m = self.raw_rows
        return ULSProblem(
            self.X[m], self.Phi[m], self.labels, self.start, np.ones(m.sum(), bool),
            self.n_trials,
        )

    def normal_equations(self):
        r, m = self.raw_rows, ~self.raw_rows
        Pr, Pm = self.Phi[r], self.Phi[m]
        return NormalEquations(
            gram_raw=Pr.T @ Pr, rhs_raw=Pr.T @ self.X[r], xx_raw=float(self.X[r] @ self.X[r]),
            n_raw=int(r.sum()),
            gram_mod=Pm.T @ Pm, rhs_mod=Pm.T @ self.X[m], xx_mod=float(self.X[m] @ self.X[m]),
            n_mod=int(m.sum()),
            labels=list(self.labels),
        )


def modulate(candidates, output, bank, labels=None, start=1):
    """Assemble the ULS problem from candidate columns and the output.

    Parameters
    ----------
    candidates : ndarray of shape (n_trials, n_eff, p) or (n_eff, p)
        Expanded regressors, e.g. from :func:`expand_regressors`.
    output : ndarray of shape (n_trials, n_eff) or (n_eff,)
        Output samples aligned with the candidate rows.
    bank : TestFunctionBank or None
        ``None`` gives the plain least-squares problem.
    """
    Phi = np.asarray(candidates, dtype=float)
    X = np.asarray(output, dtype=float)
    if Phi.ndim == 2:
        Phi, X = Phi[None], X[None]
    if X.shape != Phi.shape[:2]:
        raise ValueError("output and candidate rows are not aligned")
    xs, phis, masks = [], [], []
    for w in range(Phi.shape[0]):
        xs.append(X[w])
        phis.append(Phi[w])
        masks.append(np.ones(X.shape[1], bool))
        if bank is not None:
            xm = modulate_block(X[w], bank)
            xs.append(xm)
            phis.append(modulate_block(Phi[w], bank))
            masks.append(np.zeros(xm.shape[0], bool))
    labels = list(labels) if labels is not None else list(range(Phi.shape[2]))
    return ULSProblem(
        np.concatenate(xs), np.concatenate(phis), labels, start, np.concatenate(masks),
        Phi.shape[0],
    )


class Design:
    """Candidate columns for every channel of a trial set at once.

    All channels enter with lags ``1..max_lag`` and every model drawn from the
    design shares the same first regression row ``max_lag + 1``. Because the
    columns of a sub-model are a subset of the full design, one Gram matrix
    serves every bivariate and trivariate equation.
    """

    def __init__(self, data, dictionary, max_lag, bank=None):
        self.data = data
        self.dictionary = dictionary
        self.max_lag = int(max_lag)
        self.bank = bank
        self.start = self.max_lag + 1
        spec = ModelSpec(data.channels[0], data.channels, self.max_lag)
        self.spec = spec
        self.atoms = dictionary.evaluate(data.n_samples)
        self.labels = [
            (c, i, m)
            for c in data.channels
            for i in range(1, self.max_lag + 1)
            for m in range(len(dictionary))
        ]
        self._index = {lab: n for n, lab in enumerate(self.labels)}

    @property
    def n_eff(self):
        return self.data.n_samples - self.start + 1

    def columns(self, spec):
        """Design column indices of the candidate terms of ``spec``."""
        M = len(self.dictionary)
        return np.array(
            [self._index[(s, i, m)] for s, i in spec.terms() for m in range(M)], dtype=int
        )

    def trial_block(self, data, w):
        """Raw candidate block ``(n_eff, p)`` and outputs ``(n_eff, C)`` of trial ``w``."""
        sig = data.data[w]  # (N, C)
        lagged = _lagged(sig.T, range(1, self.max_lag + 1), self.start)  # (C, n_eff, L)
        atoms = self.atoms[self.start - 1 :]
        Phi = np.einsum("cti,tm->tcim", lagged, atoms).reshape(self.n_eff, -1)
        return Phi, sig[self.start - 1 :]

    def normal_equations(self, data=None):
        """Accumulate Gram and cross products over trials.

        Returns a :class:`NormalEquations` whose ``rhs_*`` and ``xx_*`` carry one
        column / entry per channel used as output.
        """
        data = self.data if data is None else data
        p, C = len(self.labels), len(data.channels)
        G = {k: np.zeros((p, p)) for k in ("raw", "mod")}
        B = {k: np.zeros((p, C)) for k in ("raw", "mod")}
        XX = {k: np.zeros(C) for k in ("raw", "mod")}
        n = {"raw": 0, "mod": 0}
        for w in range(data.n_trials):
            Phi, X = self.trial_block(data, w)
            blocks = {"raw": (Phi, X)}
            if self.bank is not None:
                blocks["mod"] = (modulate_block(Phi, self.bank), modulate_block(X, self.bank))
            for k, (P, Y) in blocks.items():
                G[k] += P.T @ P
                B[k] += P.T @ Y
                XX[k] += np.einsum("tc,tc->c", Y, Y)
                n[k] += P.shape[0]
        return NormalEquations(
            G["raw"], B["raw"], XX["raw"], n["raw"],
            G["mod"], B["mod"], XX["mod"], n["mod"], list(self.labels),
        )
