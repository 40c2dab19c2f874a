"""Cardinal B-splines, the multiwavelet dictionary and the test-function bank.

The time-varying coefficients of a TVARX model are expanded onto dilated and
shifted cardinal B-splines

    xi(u) = 2**(j/2) * B_r(2**j * u - k),    u = t / N in [0, 1],

for several orders ``r`` at one scale ``j``. The weak-derivative modulation
used by the ultra least squares criterion relies on a second family: the
``(d+1)``-th order B-spline and its first ``d`` derivatives, sampled on a short
support and normalised to unit energy.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from math import comb

import numpy as np

__all__ = [
    "WaveletAtom",
    "BasisDictionary",
    "TestFunctionBank",
    "eval_bspline",
    "eval_bspline_derivative",
    "eval_atom",
    "build_dictionary",
    "build_test_bank",
]


def _check_order(r):
    if int(r) != r or r < 1:
        raise ValueError(f"B-spline order must be an integer >= 1, got {r!r}")
    return int(r)


def eval_bspline(r, u, left_limit=False):
    """Evaluate the cardinal B-spline of order ``r`` (degree ``r - 1``).

    Uses the Cox-de Boor recursion on the integer knots ``0, 1, ..., r``.

    Parameters
    ----------
    r : int
        Order, ``r >= 1``. ``B_1`` is the indicator of ``[0, 1)``.
    u : float or array_like
        Evaluation points.
    left_limit : bool or array_like of bool, default=False
        Where true, the order-1 indicator is taken as ``(0, 1]`` so that the
        left limit is returned at knots. Only matters for ``r == 1`` since
        higher orders are continuous.

    Returns
    -------
    float or ndarray
        ``B_r(u)``; zero outside ``[0, r]``.
    """
    r = _check_order(r)
    u_arr = np.asarray(u, dtype=float)
    left = np.broadcast_to(np.asarray(left_limit, dtype=bool), u_arr.shape)
    # level-1 values B_1(u - k) for k = 0..r-1
    shifts = u_arr[..., None] - np.arange(r)
    lo = np.where(left[..., None], shifts > 0.0, shifts >= 0.0)
    hi = np.where(left[..., None], shifts <= 1.0, shifts < 1.0)
    vals = (lo & hi).astype(float)
    for s in range(2, r + 1):
        x = shifts[..., : r - s + 1]
        vals = (x * vals[..., :-1] + (s - x) * vals[..., 1:]) / (s - 1)
    out = vals[..., 0]
    return float(out) if out.ndim == 0 else out


def eval_bspline_derivative(r, u, v):
    """Evaluate the ``v``-th derivative of the order-``r`` cardinal B-spline.

    Applies ``B_r' (u) = B_{r-1}(u) - B_{r-1}(u - 1)`` ``v`` times, which gives
    a binomial combination of shifted order-``r - v`` splines. For ``v = r - 1``
    the result is piecewise constant and right-continuous at the knots.
    """
    r = _check_order(r)
    if v < 0 or v >= r:
        raise ValueError(f"derivative order must lie in [0, {r - 1}], got {v}")
    u_arr = np.asarray(u, dtype=float)
    out = np.zeros_like(u_arr)
    for k in range(v + 1):
        out = out + (-1) ** k * comb(v, k) * eval_bspline(r - v, u_arr - k)
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True, order=True)
class WaveletAtom:
    """One dilated and shifted B-spline ``2**(j/2) B_r(2**j u - k)``."""

    order: int
    scale: int
    shift: int

    def __post_init__(self):
        _check_order(self.order)
        if self.scale < 0:
            raise ValueError("scale must be >= 0")
        if not -self.order <= self.shift <= 2**self.scale - 1:
            raise ValueError(
                f"shift {self.shift} outside [-{self.order}, {2**self.scale - 1}]"
            )

    @property
    def support(self):
        """Support of the atom in normalised time ``u``."""
        width = 2.0**-self.scale
        return self.shift * width, (self.shift + self.order) * width

    def __call__(self, u):
        u_arr = np.asarray(u, dtype=float)
        # close the unit interval on the right so the last sample is covered
        x = 2.0**self.scale * u_arr - self.shift
        val = 2.0 ** (self.scale / 2) * eval_bspline(
            self.order, x, left_limit=u_arr >= 1.0
        )
        return val


def eval_atom(atom, t, N):
    """Evaluate ``atom`` at sample index ``t`` of an ``N``-sample record."""
    t_arr = np.asarray(t)
    if np.any(t_arr < 1) or np.any(t_arr > N):
        raise ValueError(f"sample index must lie in [1, {N}]")
    return atom(t_arr / N)


@dataclass(frozen=True)
class BasisDictionary:
    """Union of B-spline wavelet families at one scale.

    Atoms are ordered by order ``r`` and then shift ``k``.
    """

    orders: tuple
    scale: int
    atoms: tuple

    @property
    def size(self):
        return len(self.atoms)

    def __len__(self):
        return len(self.atoms)

    def evaluate(self, N):
        """Return the ``(N, M)`` matrix of atom values at ``t = 1..N``.

        The result is cached and read-only.
        """
        return _atom_matrix(self, int(N))


@lru_cache(maxsize=16)
def _atom_matrix(dictionary, N):
    u = np.arange(1, N + 1) / N
    out = np.column_stack([atom(u) for atom in dictionary.atoms])
    out.flags.writeable = False
    return out


def build_dictionary(orders=(3, 4, 5, 6), scale=4):
    """Enumerate every atom with shift in ``{-r, ..., 2**j - 1}``.

    Examples
    --------
    >>> build_dictionary((3, 4, 5, 6), 4).size
    82
    """
    orders = tuple(sorted({_check_order(r) for r in orders}))
    if not orders:
        raise ValueError("at least one B-spline order is required")
    if scale < 0:
        raise ValueError("scale must be >= 0")
    atoms = tuple(
        WaveletAtom(r, scale, k) for r in orders for k in range(-r, 2**scale)
    )
    return BasisDictionary(orders=orders, scale=scale, atoms=atoms)


@dataclass(frozen=True)
class TestFunctionBank:
    """Sampled test function and its unit-norm derivatives.

    Attributes
    ----------
    order : int
        Highest derivative order ``d``.
    support : int
        Number of samples ``n0`` covering ``[0, d + 1]``.
    omega : ndarray of shape (n0,)
        ``B_{d+1}`` at the cell centres.
    derivatives : ndarray of shape (d, n0)
        Row ``v - 1`` holds the normalised ``v``-th derivative.
    """

    __test__ = False  # not a pytest class despite the name

    order: int
    support: int
    omega: np.ndarray
    derivatives: np.ndarray


def build_test_bank(d=2, n0=20):
    """Build the normalised test-function bank for weak-derivative modulation.

    The support ``[0, d + 1]`` is split into ``n0`` equal cells. ``omega`` is
    sampled at the cell centres; each derivative sample is the exact cell
    average of the analytic derivative, i.e. a difference of the next lower
    derivative across the cell edges. Every derivative sequence therefore sums
    to zero, so constant signals modulate to zero.
    """
    if d < 1:
        raise ValueError(f"derivative order must be >= 1, got {d}")
    if n0 < d + 2:
        raise ValueError(f"support of {n0} samples cannot resolve order {d}")
    r = d + 1
    width = r / n0
    edges = np.arange(n0 + 1) * width
    omega = eval_bspline(r, edges[:-1] + width / 2)
    derivs = np.empty((d, n0))
    for v in range(1, d + 1):
        lower = eval_bspline_derivative(r, edges, v - 1)
        lower[[0, -1]] = 0.0  # all lower derivatives vanish at the ends
        cell = np.diff(lower) / width
        derivs[v - 1] = cell / np.linalg.norm(cell)
    return TestFunctionBank(order=d, support=n0, omega=omega, derivatives=derivs)
