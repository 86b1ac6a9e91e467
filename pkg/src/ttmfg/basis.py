"""Scaled Legendre polynomial basis on an interval [-L, L].

Every spatial axis carries the same family: classical Legendre polynomials
on the reference interval [-1, 1] (psi_0 == 1, psi_i(1) == 1, three-term
recurrence), composed with the affine map s = x / L.  The basis is orthogonal
but not orthonormal: int_{-1}^{1} psi_i psi_j ds = 2 / (2 i + 1) delta_ij.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np


@dataclass(frozen=True)
class BasisSpec:
    """Polynomial basis of a single axis.

    Parameters
    ----------
    degree : int
        Highest polynomial index n; the basis has n + 1 functions.
    half_width : float
        Physical half width L > 0; the axis domain is [-L, L].
    """

    degree: int
    half_width: float

    def __post_init__(self) -> None:
        if self.degree < 0:
            raise ValueError(f"degree must be non-negative, got {self.degree}")
        if not self.half_width > 0:
            raise ValueError(f"half_width must be positive, got {self.half_width}")

    @property
    def size(self) -> int:
        """Number of basis functions, degree + 1."""
        return self.degree + 1


def to_reference(spec: BasisSpec, x):
    """Map physical coordinates x in [-L, L] to reference s = x / L."""
    return np.asarray(x, dtype=float) / spec.half_width


def from_reference(spec: BasisSpec, s):
    """Map reference coordinates s in [-1, 1] to physical x = L * s."""
    return np.asarray(s, dtype=float) * spec.half_width


def _check_reference(s: np.ndarray) -> None:
    # Tiny slack absorbs roundoff from to_reference on boundary points.
    if s.size and np.max(np.abs(s)) > 1.0 + 1e-12:
        bad = float(np.max(np.abs(s)))
        raise ValueError(
            f"reference coordinate out of range: |s| = {bad} > 1; "
            "extrapolation is a caller-side policy, not a basis operation"
        )


def _values(degree: int, s: np.ndarray) -> np.ndarray:
    """Recurrence table of psi_0 .. psi_n, shape s.shape + (n + 1,)."""
    out = np.empty(s.shape + (degree + 1,), dtype=float)
    out[..., 0] = 1.0
    if degree >= 1:
        out[..., 1] = s
    for i in range(1, degree):
        # Bonnet: (i + 1) psi_{i+1} = (2 i + 1) s psi_i - i psi_{i-1}
        out[..., i + 1] = ((2 * i + 1) * s * out[..., i] - i * out[..., i - 1]) / (i + 1)
    return out


def _derivatives(degree: int, s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Tables (psi, psi') built jointly; both shaped s.shape + (n + 1,)."""
    vals = _values(degree, s)
    der = np.zeros_like(vals)
    if degree >= 1:
        der[..., 1] = 1.0
    for i in range(1, degree):
        # psi'_{i+1} = (2 i + 1) psi_i + psi'_{i-1}, stable on and past s = +-1
        der[..., i + 1] = (2 * i + 1) * vals[..., i] + der[..., i - 1]
    return vals, der


def _second_derivatives(degree: int, s: np.ndarray) -> np.ndarray:
    vals, der = _derivatives(degree, s)
    der2 = np.zeros_like(vals)
    for i in range(1, degree):
        der2[..., i + 1] = (2 * i + 1) * der[..., i] + der2[..., i - 1]
    return der2


def eval_basis(spec: BasisSpec, s, *, validate: bool = True) -> np.ndarray:
    """Evaluate psi_0 .. psi_n at reference coordinates s.

    Parameters
    ----------
    s : array_like
        Reference coordinates; must satisfy |s| <= 1 unless ``validate`` is
        disabled by a caller that applies its own extrapolation policy.

    Returns
    -------
    ndarray
        Shape ``s.shape + (n + 1,)``.
    """
    s = np.asarray(s, dtype=float)
    if validate:
        _check_reference(s)
    return _values(spec.degree, s)


def eval_basis_derivative(spec: BasisSpec, s, *, validate: bool = True) -> np.ndarray:
    """First derivatives d psi_i / d s at reference coordinates s."""
    s = np.asarray(s, dtype=float)
    if validate:
        _check_reference(s)
    return _derivatives(spec.degree, s)[1]


def eval_basis_second_derivative(spec: BasisSpec, s, *, validate: bool = True) -> np.ndarray:
    """Second derivatives d^2 psi_i / d s^2 at reference coordinates s."""
    s = np.asarray(s, dtype=float)
    if validate:
        _check_reference(s)
    return _second_derivatives(spec.degree, s)


@lru_cache(maxsize=None)
def _moment_vector_cached(degree: int, power: int) -> np.ndarray:
    # Gauss-Legendre with q nodes is exact through polynomial degree 2 q - 1;
    # the integrand s^p psi_i has degree at most p + n.
    q = (degree + power) // 2 + 1
    nodes, weights = np.polynomial.legendre.leggauss(q)
    table = _values(degree, nodes)
    vec = (weights * nodes**power) @ table
    # Entries that vanish identically (i > p, or i + p odd by parity) come out
    # at roundoff scale; pin them to exact zeros.
    idx = np.arange(degree + 1)
    vec[(idx > power) | ((idx + power) % 2 == 1)] = 0.0
    vec.flags.writeable = False
    return vec


def moment_vector(spec: BasisSpec, power: int) -> np.ndarray:
    """Reference-interval moments m_i = int_{-1}^{1} s^power psi_i(s) ds.

    Cached per (degree, power); the returned array is read-only.  Physical
    moments pick up a Jacobian factor L**(power + 1) on top of these.
    """
    if power < 0:
        raise ValueError(f"moment power must be non-negative, got {power}")
    return _moment_vector_cached(spec.degree, power)


def gauss_points(spec: BasisSpec, count: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre nodes and weights on the physical interval [-L, L]."""
    nodes, weights = np.polynomial.legendre.leggauss(count)
    return nodes * spec.half_width, weights * spec.half_width
