"""Forward orthogonal regression with regularised term selection.

Terms are added greedily. At every step each remaining candidate is
orthogonalised against the bases already chosen and scored with the
zero-order regularised error reduction ratio

    RERR0(X, h) = <X, h>**2 / (<X, X> * (<h, h> + mu)).

Selection stops at the first minimum of the adjustable prediction error sum
of squares ``APRESS(g) = RSS_g / n / (1 - g v / n)**2``.

All arithmetic runs on inner products (a Gram matrix and a cross-product
vector) so a problem with tens of thousands of rows costs the same as its
``p x p`` Gram matrix. Three variants share the code:

``ols``
    ``mu = 0`` on the unmodulated rows.
``rols``
    ``mu > 0`` on the unmodulated rows.
``urols``
    ``mu > 0`` on unmodulated and modulated rows together.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import solve_triangular

from .tvarx import ULSProblem, _lagged

logger = logging.getLogger(__name__)

__all__ = [
    "EmptyModelError",
    "SelectionConfig",
    "SelectedModel",
    "CoefficientTrajectories",
    "rerr0",
    "apress",
    "forward_select",
    "solve_params",
    "recover_coefficients",
    "rls_fit",
]

VARIANTS = ("ols", "rols", "urols")


class EmptyModelError(ValueError):
    """Raised when no candidate term can be selected."""


def rerr0(X, gamma, mu=0.0):
    """Zero-order regularised error reduction ratio of ``gamma`` for ``X``."""
    X = np.asarray(X, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    xx = float(X @ X)
    if xx <= 0.0:
        raise ValueError("RERR0 is undefined for a zero output vector")
    if mu < 0:
        raise ValueError("mu must be >= 0")
    denom = xx * (float(gamma @ gamma) + mu)
    if denom == 0.0:
        return 0.0
    return float(X @ gamma) ** 2 / denom


def apress(residual_ss, g, v, N):
    """Adjustable prediction error sum of squares of a ``g``-term model.

    Raises
    ------
    OverflowError
        If ``g * v >= N``, where the penalty ``1 / (1 - g v / N)**2`` diverges.
    """
    if g * v >= N:
        raise OverflowError(f"APRESS penalty diverges for g*v = {g * v} >= N = {N}")
    return residual_ss / N / (1.0 - g * v / N) ** 2


@dataclass(frozen=True)
class SelectionConfig:
    """Settings of one forward-selection run.

    ``mu=None`` resolves to ``mu_scale`` times the mean squared column norm of
    the regression matrix, which keeps the penalty dimensionless. The ``ols``
    variant always uses ``mu = 0``.
    """

    variant: str = "urols"
    mu: float | None = None
    mu_scale: float = 1e-2
    v: float = 3.0
    max_terms: int | None = None
    rank_tol: float = 1e-10

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.mu is not None and self.mu < 0:
            raise ValueError("mu must be >= 0")
        if self.v < 1:
            raise ValueError("APRESS parameter v must be >= 1")
        if self.max_terms is not None and self.max_terms < 1:
            raise ValueError("max_terms must be positive")

    @property
    def augmented(self):
        return self.variant == "urols"

    def resolve_mu(self, gram):
        if self.variant == "ols":
            return 0.0
        if self.mu is not None:
            return float(self.mu)
        return self.mu_scale * float(np.mean(np.diag(gram)))


@dataclass
class SelectedModel:
    """Result of forward selection.

    ``R`` is unit upper triangular with ``Y = O @ R`` for the selected columns
    ``Y``; ``U`` holds the orthogonal-basis coefficients and ``D`` the squared
    norms of the orthogonal bases. Traces are indexed by term count ``g``
    starting at 0 and include the step that ended the search.
    """

    indices: np.ndarray
    labels: list
    R: np.ndarray
    U: np.ndarray
    D: np.ndarray
    params: np.ndarray
    rerr: np.ndarray
    rss: np.ndarray
    apress: np.ndarray
    mu: float
    n_rows: int
    variant: str
    basis: np.ndarray | None = field(default=None, repr=False)

    @property
    def size(self):
        return len(self.indices)


def forward_select(problem, config=None):
    """Select a parsimonious term set and estimate its parameters.

    Parameters
    ----------
    problem : ULSProblem or NormalEquations
        For an explicit problem the ``ols`` and ``rols`` variants discard the
        modulated rows.
    config : SelectionConfig, optional

    Returns
    -------
    SelectedModel

    Raises
    ------
    EmptyModelError
        If every candidate is degenerate (numerically zero).
    """
    config = SelectionConfig() if config is None else config
    explicit = isinstance(problem, ULSProblem)
    if explicit:
        rows = problem.raw_rows if not config.augmented else slice(None)
        ne = problem.normal_equations()
    else:
        ne = problem
    G, b, xx, n = ne.combined(config.augmented)
    labels = list(ne.labels)
    if xx <= 0.0:
        raise EmptyModelError("the output is identically zero")
    mu = config.resolve_mu(G)
    v = config.v
    p = len(b)
    max_terms = p if config.max_terms is None else min(config.max_terms, p)

    diag = np.diag(G).astype(float).copy()
    hh = diag.copy()
    hx = np.asarray(b, dtype=float).copy()
    coupling = np.zeros((p, max_terms))  # <gamma_q, h_s>
    available = diag > 0.0

    chosen, D, U, rerrs = [], [], [], []
    rss_trace, apress_trace = [xx], [xx / n]
    for g in range(1, max_terms + 1):
        usable = available & (hh > config.rank_tol * diag)
        if not usable.any():
            break
        scores = np.full(p, -np.inf)
        scores[usable] = hx[usable] ** 2 / (xx * (hh[usable] + mu))
        L = int(np.argmax(scores))
        if g * v >= n:
            break
        rss = rss_trace[-1] - hx[L] ** 2 / hh[L]
        ap = apress(max(rss, 0.0), g, v, n)
        rss_trace.append(rss)
        apress_trace.append(ap)
        if ap > apress_trace[-2]:
            break
        k = len(chosen)
        c = G[:, L] - coupling[:, :k] @ (coupling[L, :k] / np.asarray(D))
        coupling[:, k] = c
        d_new, x_new = hh[L], hx[L]
        chosen.append(L)
        D.append(d_new)
        U.append(x_new / d_new)
        rerrs.append(scores[L])
        hh = hh - c**2 / d_new
        hx = hx - c * (x_new / d_new)
        available[L] = False

    if not chosen and not np.any(available & (diag > 0.0)):
        raise EmptyModelError("all candidate terms are degenerate")

    eta = len(chosen)
    R = np.eye(eta)
    for k in range(1, eta):
        R[:k, k] = coupling[chosen[k], :k] / np.asarray(D[:k])
    model = SelectedModel(
        indices=np.asarray(chosen, dtype=int),
        labels=[labels[q] for q in chosen] if labels else chosen,
        R=R,
        U=np.asarray(U),
        D=np.asarray(D),
        params=np.zeros(eta),
        rerr=np.asarray(rerrs),
        rss=np.asarray(rss_trace),
        apress=np.asarray(apress_trace),
        mu=mu,
        n_rows=int(n),
        variant=config.variant,
    )
    model.params = solve_params(model)
    if explicit and eta:
        Y = problem.Phi[rows][:, model.indices]
        model.basis = solve_triangular(R, Y.T, trans="T", unit_diagonal=True).T
    logger.debug("selected %d of %d terms (%s, mu=%.3g)", eta, p, config.variant, mu)
    return model


def solve_params(model):
    """Back-substitute ``R @ params = U`` through the unit-triangular ``R``."""
    if model.size == 0:
        return np.zeros(0)
    return solve_triangular(model.R, model.U, unit_diagonal=True)


@dataclass
class CoefficientTrajectories:
    """Time-varying coefficients ``c_{n,i}(t)`` of one equation.

    ``values[t - 1, n, i - 1]`` multiplies ``sources[n]`` at lag ``i``;
    lags beyond a source's own maximum are zero.
    """

    output: str
    sources: tuple
    values: np.ndarray

    @property
    def max_lag(self):
        return self.values.shape[2]

    def predict(self, data, start):
        """One-step predictions ``(n_trials, N - start + 1)`` for ``t >= start``."""
        idx = [data.index(s) for s in self.sources]
        lagged = _lagged(
            np.moveaxis(data.data[:, :, idx], 2, 1), range(1, self.max_lag + 1), start
        )  # (W, S, n_eff, L)
        return np.einsum("wsti,tsi->wt", lagged, self.values[start - 1 :])


def recover_coefficients(model, dictionary, spec, N):
    """Rebuild ``c_{n,i}(t) = sum_k beta * xi_k(t/N)`` from selected terms.

    Labels of ``model`` must be ``(source, lag, atom index)`` triples.
    """
    sources = tuple(spec.sources)
    values = np.zeros((N, len(sources), spec.max_lag))
    if model.size == 0:
        return CoefficientTrajectories(spec.output, sources, values)
    atoms = dictionary.evaluate(N)
    for (src, lag, m), beta in zip(model.labels, model.params):
        values[:, sources.index(src), lag - 1] += beta * atoms[:, m]
    return CoefficientTrajectories(spec.output, sources, values)


def rls_fit(data, spec, forgetting, delta=1e3, start=None):
    """Exponentially weighted recursive least squares, run per trial.

    Coefficients start at zero with ``P0 = delta * I``; the a-posteriori
    estimate at each sample becomes the coefficient at that time and
    trajectories are averaged over trials.
    """
    if not 0.0 < forgetting < 1.0:
        raise ValueError("forgetting factor must lie in (0, 1)")
    start = spec.max_lag + 1 if start is None else int(start)
    N, W = data.n_samples, data.n_trials
    terms = spec.terms()
    p = len(terms)
    sig = {s: data.signal(s) for s in spec.sources}
    phi = np.stack([sig[s][:, start - 1 - i : N - i] for s, i in terms], axis=-1)
    y = data.signal(spec.output)[:, start - 1 :]
    theta = np.zeros((W, p))
    P = np.broadcast_to(delta * np.eye(p), (W, p, p)).copy()
    hist = np.zeros((N, p))
    lam = forgetting
    for n in range(phi.shape[1]):
        f = phi[:, n]
        Pf = np.einsum("wij,wj->wi", P, f)
        k = Pf / (lam + np.einsum("wi,wi->w", f, Pf))[:, None]
        err = y[:, n] - np.einsum("wi,wi->w", f, theta)
        theta = theta + k * err[:, None]
        P = (P - np.einsum("wi,wj->wij", k, Pf)) / lam
        P = 0.5 * (P + P.transpose(0, 2, 1))  # keep P symmetric under rounding
        hist[start - 1 + n] = theta.mean(axis=0)
    values = np.zeros((N, len(spec.sources), spec.max_lag))
    for col, (s, i) in enumerate(terms):
        values[:, spec.sources.index(s), i - 1] = hist[:, col]
    return CoefficientTrajectories(spec.output, tuple(spec.sources), values)


def with_variant(config, variant):
    """Copy of ``config`` with another algorithm variant."""
    return replace(config, variant=variant)
