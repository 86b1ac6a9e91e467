"""Gaussian cubature rules for semi-Lagrangian diffusion steps.

Each rule discretizes the expectation over a centered d-dimensional Gaussian
increment with independent components of common variance ``variance`` (the
propagator passes 2 * nu * dt).  Three families are provided:

* ``sl1``: 2 d axial nodes, first-order consistent (matches moments through
  order 3, but not the fourth-order ones).
* ``sl2e``: full tensor product of the three-point Gauss-Hermite rule,
  3 ** d nodes, matches all moments with per-axis degree <= 5.
* ``sl2p``: sparse center + axial + face-diagonal rule with 2 d^2 + 1 nodes,
  matches all moments through total order 5.  Axial weights turn negative
  for d > 4, which is tolerated by design and exposed via
  ``has_negative_weights``.

A ``det`` rule (single node at the origin) covers the zero-diffusion limit.
"""

from __future__ import annotations

from itertools import product
from typing import Iterator, NamedTuple

import numpy as np
from scipy.special import factorial2

RULE_KINDS = ("sl1", "sl2e", "sl2p", "det")

# Tensor construction of sl2e is capped here; beyond it the node count is
# no longer desk-scale (3 ** 11 > 177k) and sl2p is the intended rule.
MAX_TENSOR_DIM = 10


class CubatureRule(NamedTuple):
    """Nodes (M, d), weights (M,) and the family tag of a cubature rule."""

    nodes: np.ndarray
    weights: np.ndarray
    kind: str

    @property
    def dim(self) -> int:
        return self.nodes.shape[1]

    @property
    def has_negative_weights(self) -> bool:
        return bool(np.any(self.weights < 0))


def _check_args(dim: int, variance: float) -> None:
    if dim < 1:
        raise ValueError(f"dim must be at least 1, got {dim}")
    if variance <= 0:
        raise ValueError(f"variance must be positive, got {variance}")


def first_order_rule(dim: int, variance: float) -> CubatureRule:
    """Axial rule with 2 d nodes at +- sqrt(d * variance) e_i, weights 1/(2 d)."""
    _check_args(dim, variance)
    radius = np.sqrt(dim * variance)
    nodes = np.concatenate([radius * np.eye(dim), -radius * np.eye(dim)])
    weights = np.full(2 * dim, 1.0 / (2 * dim))
    return CubatureRule(nodes, weights, "sl1")


def tensor_hermite_rule(dim: int, variance: float) -> CubatureRule:
    """Tensor product of the three-point Gauss-Hermite rule, 3 ** d nodes."""
    _check_args(dim, variance)
    if dim > MAX_TENSOR_DIM:
        raise ValueError(
            f"tensor rule has 3**{dim} nodes; use the sparse sl2p rule beyond "
            f"dim {MAX_TENSOR_DIM}"
        )
    radius = np.sqrt(3.0 * variance)
    axis_nodes = np.array([-radius, 0.0, radius])
    axis_weights = np.array([1.0, 4.0, 1.0]) / 6.0
    nodes = np.array(list(product(axis_nodes, repeat=dim)))
    weights = np.prod(np.array(list(product(axis_weights, repeat=dim))), axis=1)
    return CubatureRule(nodes, weights, "sl2e")


def sl2p_rule(dim: int, variance: float) -> CubatureRule:
    """Sparse second-order rule: center, axial and face-diagonal nodes.

    Weights follow the closed form
        w_center = (d^2 - 7 d + 18) / 18,
        w_axial = (4 - d) / 18,
        w_diag = 1 / 36,
    with radius sqrt(3 * variance).  For dim == 1 this degenerates to the
    three-point rule (no diagonal nodes).
    """
    _check_args(dim, variance)
    radius = np.sqrt(3.0 * variance)
    w_center = (dim * dim - 7 * dim + 18) / 18.0
    w_axial = (4 - dim) / 18.0
    w_diag = 1.0 / 36.0

    blocks = [np.zeros((1, dim)), radius * np.eye(dim), -radius * np.eye(dim)]
    weights = [np.array([w_center]), np.full(2 * dim, w_axial)]
    diag = []
    for i in range(dim):
        for j in range(i + 1, dim):
            for si, sj in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
                node = np.zeros(dim)
                node[i] = si * radius
                node[j] = sj * radius
                diag.append(node)
    if diag:
        blocks.append(np.array(diag))
        weights.append(np.full(len(diag), w_diag))
    return CubatureRule(np.concatenate(blocks), np.concatenate(weights), "sl2p")


def deterministic_rule(dim: int) -> CubatureRule:
    """Single node at the origin; the zero-diffusion limit of every family."""
    if dim < 1:
        raise ValueError(f"dim must be at least 1, got {dim}")
    return CubatureRule(np.zeros((1, dim)), np.ones(1), "det")


def make_rule(kind: str, dim: int, variance: float) -> CubatureRule:
    """Build a rule by family tag; ``variance`` is ignored for ``det``."""
    if kind == "sl1":
        return first_order_rule(dim, variance)
    if kind == "sl2e":
        return tensor_hermite_rule(dim, variance)
    if kind == "sl2p":
        return sl2p_rule(dim, variance)
    if kind == "det":
        return deterministic_rule(dim)
    raise ValueError(f"unknown rule kind {kind!r}; expected one of {RULE_KINDS}")


def solve_moment_system(dim: int, variance: float) -> CubatureRule:
    """Re-derive the sl2p rule from its moment-matching equations.

    Unknowns are the radius and the three weights of the center/axial/diagonal
    layout.  Matching E[y_i^2], E[y_i^4], E[y_i^2 y_j^2] and total mass gives,
    in solvable order,

        r^2 = E[y_i^4] / E[y_i^2]                (pure 4th / pure 2nd ratio)
        w_diag = E[y_i^2 y_j^2] / (4 r^4)        (4 diagonal nodes per pair)
        w_axial = (E[y_i^2] / r^2 - 4 (d - 1) w_diag) / 2
        w_center = 1 - 2 d w_axial - 2 d (d - 1) w_diag

    This is deliberately a second, equation-driven route used to validate the
    closed-form weights in :func:`sl2p_rule`.
    """
    if dim < 2:
        raise ValueError("the moment system needs dim >= 2 (no mixed moments below)")
    _check_args(dim, variance)
    m2 = variance
    m4_pure = 3.0 * variance**2
    m4_mixed = variance**2
    r2 = m4_pure / m2
    w_diag = m4_mixed / (4.0 * r2**2)
    w_axial = (m2 / r2 - 4.0 * (dim - 1) * w_diag) / 2.0
    w_center = 1.0 - 2 * dim * w_axial - 2 * dim * (dim - 1) * w_diag

    reference = sl2p_rule(dim, variance)
    weights = np.empty_like(reference.weights)
    weights[0] = w_center
    weights[1 : 2 * dim + 1] = w_axial
    weights[2 * dim + 1 :] = w_diag
    nodes = reference.nodes * (np.sqrt(r2) / np.sqrt(3.0 * variance))
    return CubatureRule(nodes, weights, "sl2p")


def _multi_indices(dim: int, total: int) -> Iterator[tuple[int, ...]]:
    """All multi-indices alpha >= 0 with |alpha| == total."""
    if dim == 1:
        yield (total,)
        return
    for head in range(total + 1):
        for rest in _multi_indices(dim - 1, total - head):
            yield (head, *rest)


def _gaussian_moment(alpha: tuple[int, ...], variance: float) -> float:
    """E[prod y_i^alpha_i] for iid centered normals of the given variance."""
    if any(a % 2 for a in alpha):
        return 0.0
    out = 1.0
    for a in alpha:
        if a:
            out *= float(factorial2(a - 1)) * variance ** (a // 2)
    return out


def moment_defect_by_order(
    rule: CubatureRule, variance: float, order: int
) -> dict[int, float]:
    """Worst scaled moment defect at each exact total order 0 .. order.

    The defect of a multi-index alpha is |sum_l w_l y_l^alpha - E[Y^alpha]|
    divided by variance ** (|alpha| / 2), which makes the table invariant
    under rescaling of the increment.
    """
    out: dict[int, float] = {}
    for total in range(order + 1):
        worst = 0.0
        scale = variance ** (total / 2.0)
        for alpha in _multi_indices(rule.dim, total):
            approx = float(
                rule.weights @ np.prod(rule.nodes ** np.asarray(alpha), axis=1)
            )
            worst = max(worst, abs(approx - _gaussian_moment(alpha, variance)) / scale)
        out[total] = worst
    return out


def moment_defect(rule: CubatureRule, variance: float, order: int) -> float:
    """Maximum scaled moment defect over all total orders <= order."""
    return max(moment_defect_by_order(rule, variance, order).values())
