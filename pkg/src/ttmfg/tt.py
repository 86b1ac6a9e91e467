"""Tensor-train representation of smooth functions on a box.

A function f on the box prod_k [-L_k, L_k] is stored as a tensor train over
per-axis Legendre coefficients:

    f(x) = sum_{i_1 .. i_d} C_1[i_1] C_2[i_2] ... C_d[i_d]
           psi_{i_1}(x_1 / L_1) ... psi_{i_d}(x_d / L_d)

with cores C_k of shape (r_{k-1}, n_k + 1, r_k) and boundary ranks
r_0 = r_d = 1.  Evaluation, gradients and Laplacians contract the chain
against batches of points; all point-wise work is vectorized and chunked so
memory stays proportional to the chunk size times the largest bond.

Points slightly outside the box are handled by polynomial extension up to a
relative margin (default 10 percent of each half width) and clamped beyond
it; semi-Lagrangian feet land there routinely and need a finite answer, not
an exception.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .basis import (
    BasisSpec,
    eval_basis,
    eval_basis_derivative,
    eval_basis_second_derivative,
    moment_vector,
)

_CHUNK = 1 << 15


@dataclass
class TtFunction:
    """Tensor train over scaled Legendre bases; see module docstring."""

    cores: list[np.ndarray]
    basis: tuple[BasisSpec, ...]
    margin: float = 0.1

    def __post_init__(self) -> None:
        self.basis = tuple(self.basis)
        if len(self.cores) != len(self.basis):
            raise ValueError(
                f"{len(self.cores)} cores but {len(self.basis)} basis specs"
            )
        if not self.cores:
            raise ValueError("a tensor train needs at least one core")
        if self.margin < 0:
            raise ValueError(f"margin must be non-negative, got {self.margin}")
        prev = 1
        for k, (core, spec) in enumerate(zip(self.cores, self.basis)):
            if core.ndim != 3:
                raise ValueError(f"core {k} must be 3-dimensional, got {core.ndim}")
            if core.shape[0] != prev:
                raise ValueError(
                    f"core {k} left rank {core.shape[0]} != previous right rank {prev}"
                )
            if core.shape[1] != spec.size:
                raise ValueError(
                    f"core {k} has {core.shape[1]} modes but basis degree "
                    f"{spec.degree} implies {spec.size}"
                )
            prev = core.shape[2]
        if prev != 1:
            raise ValueError(f"last core right rank must be 1, got {prev}")

    @property
    def dim(self) -> int:
        return len(self.cores)

    @property
    def ranks(self) -> tuple[int, ...]:
        """Bond ranks including the unit boundary ranks, length dim + 1."""
        return (1,) + tuple(core.shape[2] for core in self.cores)

    @property
    def half_widths(self) -> np.ndarray:
        return np.array([spec.half_width for spec in self.basis])

    def __call__(self, points: np.ndarray) -> np.ndarray:
        return tt_value(self, points)


def _check_points(tt: TtFunction, points) -> np.ndarray:
    points = np.asarray(points, dtype=float)
    if points.ndim != 2 or points.shape[1] != tt.dim:
        raise ValueError(
            f"points must have shape (N, {tt.dim}), got {points.shape}"
        )
    return points


def _reference_coords(tt: TtFunction, points: np.ndarray) -> np.ndarray:
    """Per-axis reference coordinates, clamped at the extrapolation margin."""
    s = points / tt.half_widths
    cap = 1.0 + tt.margin
    return np.clip(s, -cap, cap)


_TABLE_BUILDERS = (eval_basis, eval_basis_derivative, eval_basis_second_derivative)


def _tables(tt: TtFunction, s: np.ndarray, orders: tuple[int, ...]):
    """Basis tables per axis for each requested derivative order."""
    return [
        {o: _TABLE_BUILDERS[o](spec, s[:, k], validate=False) for o in orders}
        for k, spec in enumerate(tt.basis)
    ]


def _chain_value(cores, tables) -> np.ndarray:
    left = np.ones((tables[0][0].shape[0], 1))
    for core, tab in zip(cores, tables):
        left = np.einsum("nr,rjt,nj->nt", left, core, tab[0], optimize=True)
    return left[:, 0]


def _prefixes_suffixes(cores, tables):
    n = tables[0][0].shape[0]
    prefixes = [np.ones((n, 1))]
    for core, tab in zip(cores[:-1], tables[:-1]):
        prefixes.append(
            np.einsum("nr,rjt,nj->nt", prefixes[-1], core, tab[0], optimize=True)
        )
    suffixes = [np.ones((n, 1))]
    for core, tab in zip(reversed(cores[1:]), reversed(tables[1:])):
        suffixes.append(
            np.einsum("rjt,nj,nt->nr", core, tab[0], suffixes[-1], optimize=True)
        )
    suffixes.reverse()
    return prefixes, suffixes


def _eval_chunk(tt: TtFunction, points: np.ndarray, mode: str) -> np.ndarray:
    s = _reference_coords(tt, points)
    if mode == "value":
        return _chain_value(tt.cores, _tables(tt, s, (0,)))
    order = 1 if mode in ("grad", "value_grad") else 2
    tables = _tables(tt, s, (0, order))
    prefixes, suffixes = _prefixes_suffixes(tt.cores, tables)
    inv = 1.0 / tt.half_widths
    if mode == "laplacian":
        out = np.zeros(points.shape[0])
        for k, core in enumerate(tt.cores):
            out += inv[k] ** 2 * np.einsum(
                "nr,rjt,nj,nt->n",
                prefixes[k],
                core,
                tables[k][2],
                suffixes[k],
                optimize=True,
            )
        return out
    grad = np.empty_like(points)
    for k, core in enumerate(tt.cores):
        grad[:, k] = inv[k] * np.einsum(
            "nr,rjt,nj,nt->n",
            prefixes[k],
            core,
            tables[k][1],
            suffixes[k],
            optimize=True,
        )
    if mode == "grad":
        return grad
    value = np.einsum(
        "nr,rjt,nj,nt->n",
        prefixes[-1],
        tt.cores[-1],
        tables[-1][0],
        suffixes[-1],
        optimize=True,
    )
    return value, grad


def _chunked(tt: TtFunction, points, mode: str):
    points = _check_points(tt, points)
    n = points.shape[0]
    if n <= _CHUNK:
        return _eval_chunk(tt, points, mode)
    parts = [
        _eval_chunk(tt, points[i : i + _CHUNK], mode) for i in range(0, n, _CHUNK)
    ]
    if mode == "value_grad":
        return (
            np.concatenate([p[0] for p in parts]),
            np.concatenate([p[1] for p in parts]),
        )
    return np.concatenate(parts)


def tt_value(tt: TtFunction, points) -> np.ndarray:
    """Evaluate f at points of shape (N, d); returns (N,)."""
    return _chunked(tt, points, "value")


def tt_grad(tt: TtFunction, points) -> np.ndarray:
    """Gradient of f at points of shape (N, d); returns (N, d)."""
    return _chunked(tt, points, "grad")


def tt_value_and_grad(tt: TtFunction, points) -> tuple[np.ndarray, np.ndarray]:
    """Value and gradient in one pass over the chain."""
    return _chunked(tt, points, "value_grad")


def tt_laplacian(tt: TtFunction, points) -> np.ndarray:
    """Sum of pure second partials of f at points of shape (N, d)."""
    return _chunked(tt, points, "laplacian")


def wrap_periodic(points, half_widths) -> np.ndarray:
    """Shift points into [-L_k, L_k) assuming period 2 L_k per axis."""
    points = np.asarray(points, dtype=float)
    half_widths = np.asarray(half_widths, dtype=float)
    return (points + half_widths) % (2.0 * half_widths) - half_widths


# ---------------------------------------------------------------------------
# construction helpers


def tt_rank1(basis, coeff_vectors, margin: float = 0.1) -> TtFunction:
    """Rank-one train from per-axis coefficient vectors."""
    cores = [np.asarray(c, dtype=float).reshape(1, -1, 1) for c in coeff_vectors]
    return TtFunction(cores, tuple(basis), margin)


def tt_constant(basis, value: float, margin: float = 0.1) -> TtFunction:
    """Constant function on the box of the given basis."""
    vectors = []
    for k, spec in enumerate(basis):
        vec = np.zeros(spec.size)
        vec[0] = value if k == 0 else 1.0
        vectors.append(vec)
    return tt_rank1(basis, vectors, margin)


def tt_random(basis, ranks, rng: np.random.Generator, margin: float = 0.1) -> TtFunction:
    """Random train with the given internal bond ranks (length dim - 1)."""
    basis = tuple(basis)
    bonds = (1, *ranks, 1)
    if len(bonds) != len(basis) + 1:
        raise ValueError(
            f"need {len(basis) - 1} internal ranks for {len(basis)} axes, "
            f"got {len(ranks)}"
        )
    cores = []
    for k, spec in enumerate(basis):
        shape = (bonds[k], spec.size, bonds[k + 1])
        cores.append(rng.standard_normal(shape) / np.sqrt(np.prod(shape)))
    return TtFunction(cores, basis, margin)


def tt_from_dense(coeffs: np.ndarray, basis, tol: float = 0.0, margin: float = 0.1) -> TtFunction:
    """Exact (or tol-truncated) train from a dense coefficient tensor.

    Only sensible at desk scale; used as the brute-force construction route
    in tests and for small reference problems.
    """
    basis = tuple(basis)
    shape = tuple(spec.size for spec in basis)
    coeffs = np.asarray(coeffs, dtype=float)
    if coeffs.shape != shape:
        raise ValueError(f"coefficient tensor shape {coeffs.shape} != basis {shape}")
    d = len(basis)
    delta = tol * np.linalg.norm(coeffs) / np.sqrt(max(d - 1, 1))
    cores = []
    mat = coeffs.reshape(1, -1)
    rank = 1
    for k in range(d - 1):
        mat = mat.reshape(rank * shape[k], -1)
        u, s, vt = np.linalg.svd(mat, full_matrices=False)
        keep = _rank_from_tail(s, delta)
        cores.append(u[:, :keep].reshape(rank, shape[k], keep))
        mat = s[:keep, None] * vt[:keep]
        rank = keep
    cores.append(mat.reshape(rank, shape[-1], 1))
    return TtFunction(cores, basis, margin)


def _rank_from_tail(singular_values: np.ndarray, delta: float) -> int:
    """Smallest kept rank whose discarded tail has Frobenius norm <= delta."""
    if delta <= 0:
        keep = int(np.sum(singular_values > 0))
        return max(keep, 1)
    tail = np.sqrt(np.cumsum(singular_values[::-1] ** 2))[::-1]
    keep = int(np.searchsorted(-tail, -delta))
    return max(min(keep, len(singular_values)), 1)


# ---------------------------------------------------------------------------
# arithmetic


def _same_grid(f: TtFunction, g: TtFunction) -> None:
    if f.basis != g.basis:
        raise ValueError("tensor trains live on different bases; cannot combine")


def tt_scale(f: TtFunction, factor: float) -> TtFunction:
    """Multiply the represented function by a scalar."""
    cores = [c.copy() for c in f.cores]
    cores[0] = cores[0] * factor
    return replace(f, cores=cores)


def tt_add(f: TtFunction, g: TtFunction) -> TtFunction:
    """Sum of two trains on the same grid; bond ranks add."""
    _same_grid(f, g)
    d = f.dim
    if d == 1:
        return TtFunction([f.cores[0] + g.cores[0]], f.basis, f.margin)
    cores = []
    for k in range(d):
        a, b = f.cores[k], g.cores[k]
        if k == 0:
            cores.append(np.concatenate([a, b], axis=2))
        elif k == d - 1:
            cores.append(np.concatenate([a, b], axis=0))
        else:
            block = np.zeros(
                (a.shape[0] + b.shape[0], a.shape[1], a.shape[2] + b.shape[2])
            )
            block[: a.shape[0], :, : a.shape[2]] = a
            block[a.shape[0] :, :, a.shape[2] :] = b
            cores.append(block)
    return TtFunction(cores, f.basis, f.margin)


def tt_lincomb(coeffs, trains, tol: float = 0.0, max_rank: int | None = None) -> TtFunction:
    """Rounded linear combination sum_i coeffs[i] * trains[i]."""
    terms = [tt_scale(t, c) for c, t in zip(coeffs, trains)]
    out = terms[0]
    for term in terms[1:]:
        out = tt_add(out, term)
    return tt_round(out, tol, max_rank=max_rank)


def tt_round(f: TtFunction, tol: float, max_rank: int | None = None) -> TtFunction:
    """Recompress bonds by the usual two-sweep orthogonalize-then-truncate.

    The per-bond threshold is tol * |coeffs|_F / sqrt(d - 1), so the overall
    coefficient-tensor error stays below tol in the relative Frobenius sense.
    """
    d = f.dim
    cores = [c.copy() for c in f.cores]
    if d == 1:
        return replace(f, cores=cores)
    # Right-to-left sweep: leave every core but the first right-orthogonal.
    for k in range(d - 1, 0, -1):
        r0, modes, r1 = cores[k].shape
        q, r = np.linalg.qr(cores[k].reshape(r0, modes * r1).T)
        cores[k] = np.ascontiguousarray(q.T).reshape(-1, modes, r1)
        cores[k - 1] = np.einsum("abc,cd->abd", cores[k - 1], r.T, optimize=True)
    delta = tol * np.linalg.norm(cores[0]) / np.sqrt(d - 1)
    # Left-to-right sweep: truncated SVD per bond.
    for k in range(d - 1):
        r0, modes, r1 = cores[k].shape
        u, s, vt = np.linalg.svd(cores[k].reshape(r0 * modes, r1), full_matrices=False)
        keep = _rank_from_tail(s, delta)
        if max_rank is not None:
            keep = min(keep, max_rank)
        cores[k] = u[:, :keep].reshape(r0, modes, keep)
        cores[k + 1] = np.einsum(
            "ab,bnc->anc", s[:keep, None] * vt[:keep], cores[k + 1], optimize=True
        )
    return replace(f, cores=cores)


# ---------------------------------------------------------------------------
# integrals


def _axis_weights(spec: BasisSpec, power: int) -> np.ndarray:
    return spec.half_width ** (power + 1) * moment_vector(spec, power)


def box_moment(f: TtFunction, axis: int, power: int) -> float:
    """Integral of x_axis ** power * f over the whole box."""
    if not 0 <= axis < f.dim:
        raise ValueError(f"axis {axis} out of range for dim {f.dim}")
    left = np.ones(1)
    for k, (core, spec) in enumerate(zip(f.cores, f.basis)):
        w = _axis_weights(spec, power if k == axis else 0)
        left = np.einsum("r,rjt,j->t", left, core, w, optimize=True)
    return float(left[0])


def box_integral(f: TtFunction) -> float:
    """Integral of f over the whole box."""
    return box_moment(f, 0, 0)


def box_first_moments(f: TtFunction) -> np.ndarray:
    """Vector of integrals of x_k * f over the box, k = 1 .. d."""
    return np.array([box_moment(f, k, 1) for k in range(f.dim)])


def l2_norm(f: TtFunction) -> float:
    """Exact L2 norm of f over the box via the per-axis Gram diagonals."""
    acc = np.ones((1, 1))
    for core, spec in zip(f.cores, f.basis):
        gram = 2.0 * spec.half_width / (2.0 * np.arange(spec.size) + 1.0)
        acc = np.einsum("rs,rjt,sju,j->tu", acc, core, core, gram, optimize=True)
    return float(np.sqrt(max(acc[0, 0], 0.0)))
