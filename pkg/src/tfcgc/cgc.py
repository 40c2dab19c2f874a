"""Time-frequency conditional Granger causality from fitted TVARX models.

For ``GC_{Y->X|Z}(t, f)`` two models are needed at every time ``t``: the
bivariate model of ``(x, z)`` and the trivariate model of ``(x, y, z)``, each
given as lag-coefficient arrays ``coef[t, out, src, lag - 1]`` so that

    v(t) = sum_i coef[t, :, :, i - 1] @ v(t - i) + e(t).

Noise covariances are tracked with an exponential recursion. Each model is
made block-diagonal in its noise by a lower-triangular transform, taken to the
frequency domain, inverted into a transfer function, and the two transfer
functions are combined into ``Rf = G_emb^{-1} K`` whose first row splits the
spectrum of the bivariate innovation of ``x`` into intrinsic and causal parts.

Channel order is fixed: trivariate ``(x, y, z)`` and bivariate ``(x, z)``.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

__all__ = [
    "SingularVarianceError",
    "InvalidSpectrumError",
    "NormalizedModel",
    "TFCGCMap",
    "residual_covariance",
    "covariance_track",
    "normalize_bivariate",
    "normalize_trivariate",
    "frequency_grid",
    "spectral_matrix",
    "transfer",
    "combine",
    "tfcgc",
    "conditional_gc",
    "net_causal_flow",
]

NEG_CLAMP = -1e-9
NEG_WARN = -1e-6


class SingularVarianceError(ArithmeticError):
    """A noise variance or Schur-complement pivot is not positive."""


class InvalidSpectrumError(ArithmeticError):
    """The intrinsic spectral term is not positive."""


def residual_covariance(u1, u2, rho=0.05, n_init=50):
    """Recursive (co)variance ``s(t+1) = (1 - rho) s(t) + rho u1(t) u2(t)``.

    Parameters
    ----------
    u1, u2 : array_like of shape (T,) or (n_trials, T)
        Residual sequences. With several trials the product is averaged over
        trials at each time before entering the recursion.
    rho : float
        Smoothing rate in ``(0, 1)``.
    n_init : int
        ``s(1)`` is the mean product over the first ``n_init`` samples.

    Returns
    -------
    ndarray of shape (T,)
    """
    if not 0.0 < rho < 1.0:
        raise ValueError(f"smoothing rate must lie in (0, 1), got {rho}")
    prod = np.asarray(u1, dtype=float) * np.asarray(u2, dtype=float)
    if prod.ndim == 2:
        prod = prod.mean(axis=0)
    T = prod.shape[0]
    out = np.empty(T)
    out[0] = prod[: max(1, min(n_init, T))].mean()
    decay = 1.0 - rho
    for t in range(1, T):
        out[t] = decay * out[t - 1] + rho * prod[t - 1]
    return out


def covariance_track(residuals, rho=0.05, n_init=50):
    """Full ``(T, k, k)`` covariance track from residuals ``(n_trials, T, k)``."""
    res = np.asarray(residuals, dtype=float)
    if res.ndim == 2:
        res = res[None]
    if not 0.0 < rho < 1.0:
        raise ValueError(f"smoothing rate must lie in (0, 1), got {rho}")
    prod = np.einsum("wti,wtj->tij", res, res) / res.shape[0]
    T = prod.shape[0]
    out = np.empty_like(prod)
    out[0] = prod[: max(1, min(n_init, T))].mean(axis=0)
    decay = 1.0 - rho
    for t in range(1, T):
        out[t] = decay * out[t - 1] + rho * prod[t - 1]
    return out


@dataclass
class NormalizedModel:
    """Lag polynomial with decorrelated noise.

    ``poly[t, :, :, i]`` is the coefficient of lag ``i`` in
    ``sum_i poly_i v(t - i) = eps(t)``; ``poly[..., 0]`` is the
    lower-triangular normalising transform. ``noise[t]`` holds the variances
    of the now uncorrelated innovations.
    """

    poly: np.ndarray
    noise: np.ndarray
    transform: np.ndarray


def _lag_polynomial(coef, transform):
    # sum_i poly_i lambda^i with poly_0 = T and poly_i = -T @ coef_i
    T_, k = coef.shape[0], coef.shape[1]
    poly = np.empty((T_, k, k, coef.shape[3] + 1))
    poly[..., 0] = transform
    poly[..., 1:] = -np.einsum("tab,tbci->taci", transform, coef)
    return poly


def normalize_bivariate(coef, cov):
    """Remove the noise correlation of a bivariate model.

    Left-multiplies by ``P(t) = [[1, 0], [-Delta/Sigma1, 1]]``; the innovation
    variances become ``Sigma1`` and ``Sigma2 - Delta**2 / Sigma1``.

    Parameters
    ----------
    coef : ndarray of shape (T, 2, 2, L)
    cov : ndarray of shape (T, 2, 2)
    """
    coef = np.asarray(coef, dtype=float)
    cov = np.asarray(cov, dtype=float)
    s1, s2, d1 = cov[:, 0, 0], cov[:, 1, 1], cov[:, 0, 1]
    bad = np.flatnonzero(~(s1 > 0.0))
    if bad.size:
        raise SingularVarianceError(f"Sigma1 <= 0 at time index {bad[0]}")
    P = np.zeros_like(cov)
    P[:, 0, 0] = P[:, 1, 1] = 1.0
    P[:, 1, 0] = -d1 / s1
    noise = np.stack([s1, s2 - d1**2 / s1], axis=1)
    return NormalizedModel(_lag_polynomial(coef, P), noise, P)


def normalize_trivariate(coef, cov):
    """Remove the noise correlations of a trivariate ``(x, y, z)`` model.

    Applies ``Q = Q2 @ Q1``: ``Q1`` removes the part of the ``y`` and ``z``
    innovations explained by ``x``, ``Q2`` removes the part of the remaining
    ``z`` innovation explained by the remaining ``y`` innovation. The noise
    variances are the successive Schur complements.
    """
    coef = np.asarray(coef, dtype=float)
    S = np.asarray(cov, dtype=float)
    sxx = S[:, 0, 0]
    bad = np.flatnonzero(~(sxx > 0.0))
    if bad.size:
        raise SingularVarianceError(f"Sigma_xx <= 0 at time index {bad[0]}")
    T_ = S.shape[0]
    eye = np.broadcast_to(np.eye(3), (T_, 3, 3))
    Q1 = eye.copy()
    Q1[:, 1, 0] = -S[:, 1, 0] / sxx
    Q1[:, 2, 0] = -S[:, 2, 0] / sxx
    syy_x = S[:, 1, 1] - S[:, 1, 0] * S[:, 0, 1] / sxx
    bad = np.flatnonzero(~(syy_x > 0.0))
    if bad.size:
        raise SingularVarianceError(f"y|x Schur complement <= 0 at time index {bad[0]}")
    szy_x = S[:, 2, 1] - S[:, 2, 0] * S[:, 0, 1] / sxx
    szz_x = S[:, 2, 2] - S[:, 2, 0] * S[:, 0, 2] / sxx
    Q2 = eye.copy()
    Q2[:, 2, 1] = -szy_x / syy_x
    Q = Q2 @ Q1
    noise = np.stack([sxx, syy_x, szz_x - szy_x**2 / syy_x], axis=1)
    return NormalizedModel(_lag_polynomial(coef, Q), noise, Q)


def frequency_grid(fs, n_freqs=101):
    """Uniform grid of ``n_freqs`` points on ``[0, fs / 2]``."""
    return np.linspace(0.0, fs / 2.0, int(n_freqs))


def spectral_matrix(model, freqs, fs):
    """Evaluate ``A(t, f) = sum_i poly_i exp(-2j pi i f / fs)``.

    Parameters
    ----------
    model : NormalizedModel or ndarray
        A normalised model or a raw ``(T, k, k, L + 1)`` lag polynomial.

    Returns
    -------
    ndarray of shape (T, F, k, k), complex
    """
    poly = model.poly if isinstance(model, NormalizedModel) else np.asarray(model)
    freqs = np.asarray(freqs, dtype=float)
    if np.any(freqs < 0) or np.any(freqs > fs / 2 * (1 + 1e-12)):
        raise ValueError("frequencies must lie in [0, fs/2]")
    lags = np.arange(poly.shape[-1])
    phase = np.exp(-2j * np.pi * np.outer(freqs, lags) / fs)  # (F, L+1)
    return np.einsum("tabi,fi->tfab", poly, phase)


def transfer(field, cond_cap=1e12):
    """Invert a spectral field cell by cell.

    Cells whose 1-norm condition number exceeds ``cond_cap`` (or that cannot
    be inverted) are flagged and returned as NaN.

    Returns
    -------
    inverse : ndarray, same shape as ``field``
    flagged : ndarray of bool, shape ``field.shape[:-2]``
    """
    field = np.asarray(field)
    k = field.shape[-1]
    flat = field.reshape(-1, k, k)
    with np.errstate(all="ignore"):
        if k <= 3:
            inv = _adjugate_inverse(flat)
        else:
            inv = _lapack_inverse(flat)
        cond = np.abs(flat).sum(axis=1).max(axis=1) * np.abs(inv).sum(axis=1).max(axis=1)
    bad = ~np.isfinite(cond) | (cond > cond_cap)
    inv[bad] = np.nan
    return inv.reshape(field.shape), bad.reshape(field.shape[:-2])


def _lapack_inverse(flat):
    inv = np.full_like(flat, np.nan)
    ok = np.isfinite(flat).all(axis=(1, 2))
    try:
        inv[ok] = np.linalg.inv(flat[ok])
    except np.linalg.LinAlgError:
        for n in np.flatnonzero(ok):
            try:
                inv[n] = np.linalg.inv(flat[n])
            except np.linalg.LinAlgError:
                pass
    return inv


def _adjugate_inverse(flat):
    # closed-form inverse of 1 x 1 to 3 x 3 blocks; singular blocks give inf/nan
    k = flat.shape[-1]
    if k == 1:
        return 1.0 / flat
    if k == 2:
        a, b, c, d = flat[:, 0, 0], flat[:, 0, 1], flat[:, 1, 0], flat[:, 1, 1]
        adj = np.stack([np.stack([d, -b], -1), np.stack([-c, a], -1)], -2)
        return adj / (a * d - b * c)[:, None, None]
    m = [[flat[:, i, j] for j in range(3)] for i in range(3)]
    cof = np.empty_like(flat)
    for i in range(3):
        for j in range(3):
            r0, r1 = [r for r in range(3) if r != i]
            c0, c1 = [c for c in range(3) if c != j]
            cof[:, j, i] = (-1) ** (i + j) * (m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0])
    det = m[0][0] * cof[:, 0, 0] + m[0][1] * cof[:, 1, 0] + m[0][2] * cof[:, 2, 0]
    return cof / det[:, None, None]


def _condition2(A):
    # 1-norm condition of 2 x 2 blocks in closed form; singular blocks give inf
    a, b, c, d = A[..., 0, 0], A[..., 0, 1], A[..., 1, 0], A[..., 1, 1]
    det = np.abs(a * d - b * c)
    norm = np.maximum(np.abs(a) + np.abs(c), np.abs(b) + np.abs(d))
    inv_norm = np.maximum(np.abs(d) + np.abs(c), np.abs(b) + np.abs(a))
    with np.errstate(divide="ignore", invalid="ignore"):
        cond = norm * inv_norm / det
    return np.where(np.isfinite(cond), cond, np.inf)


def combine(G, K):
    """``Rf = G_emb^{-1} K`` with ``G`` embedded as ``[[Gxx,0,Gxz],[0,1,0],[Gzx,0,Gzz]]``."""
    G = np.asarray(G)
    K = np.asarray(K)
    emb = np.zeros(G.shape[:-2] + (3, 3), dtype=complex)
    emb[..., 0, 0] = G[..., 0, 0]
    emb[..., 0, 2] = G[..., 0, 1]
    emb[..., 2, 0] = G[..., 1, 0]
    emb[..., 2, 2] = G[..., 1, 1]
    emb[..., 1, 1] = 1.0
    out = np.full(K.shape, np.nan, dtype=complex)
    ok = np.isfinite(emb).all(axis=(-2, -1)) & np.isfinite(K).all(axis=(-2, -1))
    out[ok] = np.linalg.solve(emb[ok], K[ok])
    return out


@dataclass
class TFCGCMap:
    """Granger causality on a time x frequency grid.

    Attributes
    ----------
    times : ndarray of shape (T,)
        Sample indices (1-based) of the map rows.
    freqs : ndarray of shape (F,)
        Frequencies in Hz.
    gc : ndarray of shape (T, F)
        Non-negative causality values; flagged cells hold 0.
    flagged : ndarray of bool, shape (T, F)
        Cells excluded because a spectral matrix was ill-conditioned.
    threshold : float or None
        Significance threshold, if one was computed.
    """

    times: np.ndarray
    freqs: np.ndarray
    gc: np.ndarray
    flagged: np.ndarray
    threshold: float | None = None

    @property
    def significant(self):
        thr = 0.0 if self.threshold is None else self.threshold
        return (self.gc > thr) & ~self.flagged

    def thresholded(self):
        """GC values with non-significant cells set to zero."""
        return np.where(self.significant, self.gc, 0.0)

    def with_threshold(self, threshold):
        return TFCGCMap(self.times, self.freqs, self.gc, self.flagged, float(threshold))

    def band_mean(self, band):
        """Mean GC over frequencies in ``[band[0], band[1]]`` per time row."""
        sel = (self.freqs >= band[0]) & (self.freqs <= band[1])
        if not sel.any():
            raise ValueError(f"no grid frequency inside band {band}")
        return self.gc[:, sel].mean(axis=1)


def tfcgc(R, noise, times=None, freqs=None, flagged=None):
    """``GC = ln(S_E1 / intrinsic)`` from the combined field ``Rf``.

    ``S_E1 = |Rxx|^2 Sxx + |Rxy|^2 Syy + |Rxz|^2 Szz`` with the normalised
    trivariate noise variances ``noise[t] = (Sxx, Syy, Szz)``; the first term
    is the intrinsic power.

    Returns
    -------
    TFCGCMap
    """
    R = np.asarray(R)
    noise = np.asarray(noise, dtype=float)
    T_, F = R.shape[:2]
    if np.any(noise < 0):
        raise InvalidSpectrumError("negative normalised noise variance")
    flagged = np.zeros((T_, F), bool) if flagged is None else np.asarray(flagged, bool).copy()
    flagged |= ~np.isfinite(R).all(axis=(-2, -1))
    row = np.abs(R[:, :, 0, :]) ** 2 * noise[:, None, :]
    intrinsic = row[..., 0]
    total = row.sum(axis=-1)
    live = ~flagged
    if np.any(intrinsic[live] <= 0.0):
        raise InvalidSpectrumError("intrinsic spectral term is not positive")
    gc = np.zeros((T_, F))
    with np.errstate(divide="ignore", invalid="ignore"):
        gc[live] = np.log(total[live] / intrinsic[live])
    low = gc.min() if gc.size else 0.0
    if low < NEG_WARN:
        warnings.warn(f"GC dips to {low:.3g} before clamping; the model may misfit",
                      RuntimeWarning, stacklevel=2)
    gc = np.maximum(gc, 0.0)
    times = np.arange(1, T_ + 1) if times is None else np.asarray(times)
    freqs = np.arange(F) if freqs is None else np.asarray(freqs)
    return TFCGCMap(times, freqs, gc, flagged)


def conditional_gc(tri_coef, tri_cov, bi_coef, bi_cov, freqs, fs, times=None,
                   cond_cap=1e12):
    """Run normalisation, spectra, inversion, combination and GC in one call.

    ``tri_*`` describe the ``(x, y, z)`` model and ``bi_*`` the ``(x, z)`` model,
    all on the same time rows.
    """
    tri = normalize_trivariate(tri_coef, tri_cov)
    bi = normalize_bivariate(bi_coef, bi_cov)
    K, bad_k = transfer(spectral_matrix(tri, freqs, fs), cond_cap)
    A = spectral_matrix(bi, freqs, fs)
    bad_g = _condition2(A) > cond_cap
    flagged = bad_k | bad_g
    # only the first row of G_emb^-1 K enters the GC, and G^-1 is A itself
    R = A[..., 0, 0, None] * K[..., 0, :] + A[..., 0, 1, None] * K[..., 2, :]
    R = np.where(flagged[..., None], np.nan, R)[..., None, :]
    n_bad = int(flagged.sum())
    if n_bad:
        logger.info("%d ill-conditioned spectral cells flagged", n_bad)
    return tfcgc(R, tri.noise, times=times, freqs=freqs, flagged=flagged)


def net_causal_flow(gc_matrix):
    """Net outgoing minus incoming band-integrated causality per node.

    ``gc_matrix[i, j]`` is the influence of node ``i`` on node ``j``; the
    diagonal must be zero.
    """
    G = np.asarray(gc_matrix, dtype=float)
    if G.ndim != 2 or G.shape[0] != G.shape[1]:
        raise ValueError(f"causality matrix must be square, got shape {G.shape}")
    if np.any(np.diag(G) != 0.0):
        raise ValueError("self-causality must be zero")
    return (G - G.T).sum(axis=1)
