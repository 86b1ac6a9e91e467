"""Tensor-train cross interpolation of black-box point evaluators.

``cross_fit`` builds a :class:`~ttmfg.tt.TtFunction` from an oracle that maps
point batches (N, d) to values (N,).  The sampling pattern is the classical
alternating cross scheme, adapted to a functional (grid-free) setting:

* Every axis carries a fixed Gauss-Legendre collocation grid with more nodes
  than basis functions; per-axis coefficients come from least squares on
  those nodes, never from interpolation at exactly n + 1 points.
* Pivots are physical coordinates: a bond-k left pivot is a prefix
  (x_1 .. x_k), a right pivot is a suffix (x_{k+1} .. x_d).  At core k the
  oracle is sampled on the product (left pivots) x (grid of axis k) x
  (right pivots).
* Row selection runs maxvol on an orthonormal frame of the unfolded sample
  block, with rank-deficient blocks truncated to their numerical rank, so
  requesting a larger rank than the function possesses is safe.
* Cores follow the cross interpolation formula: the fitted middle block
  times the pseudo-inverse of the pivot cross matrix, which reproduces any
  function of exactly low rank once the pivots span it.

Sweeps alternate left-right and right-left; the stopping rule compares
assembled cores between consecutive sweeps.  A warm start reuses the right
pivots and the previous cores as the first comparison baseline, so a fit of
an unchanged oracle stops after a single sweep.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .basis import BasisSpec, eval_basis, gauss_points
from .tt import TtFunction

_PINV_RCOND = 1e-12


@dataclass
class CrossResult:
    """Fitted train plus sampling diagnostics; reusable as a warm start."""

    tt: TtFunction
    converged: bool
    n_sweeps: int
    n_evals: int
    n_holdout_evals: int
    residual: float | None
    right_pivots: list[np.ndarray]


def maxvol(frame: np.ndarray, *, gain_tol: float = 1e-2, max_iters: int = 200) -> np.ndarray:
    """Indices of rows forming a large-volume square submatrix of ``frame``.

    Starts from column-pivoted QR and applies the usual row-swap iteration
    until no entry of frame @ inv(frame[rows]) exceeds 1 + gain_tol in
    magnitude.  The frame must have full column rank.
    """
    frame = np.asarray(frame, dtype=float)
    m, q = frame.shape
    if m < q:
        raise ValueError(f"maxvol needs at least as many rows as columns, got {m} < {q}")
    _, _, piv = scipy.linalg.qr(frame.T, pivoting=True)
    rows = np.array(piv[:q])
    if np.linalg.matrix_rank(frame[rows]) < q:
        raise ValueError(
            "frame is column rank deficient; request a lower rank or truncate first"
        )
    coeffs = np.linalg.solve(frame[rows].T, frame.T).T
    for _ in range(max_iters):
        flat = int(np.argmax(np.abs(coeffs)))
        i, j = divmod(flat, q)
        if abs(coeffs[i, j]) <= 1.0 + gain_tol:
            break
        rows[j] = i
        coeffs = np.linalg.solve(frame[rows].T, frame.T).T
    return rows


def _select_rows(mat: np.ndarray, rank_tol: float) -> tuple[np.ndarray, int]:
    """Maxvol rows of ``mat`` after truncation to its numerical rank."""
    u, s, _ = np.linalg.svd(mat, full_matrices=False)
    if s[0] > 0:
        rank = max(1, int(np.sum(s > rank_tol * s[0])))
    else:
        rank = 1
    return maxvol(u[:, :rank]), rank


def _sample_block(oracle, prefix, grid, suffix, dim, counter):
    r0, m, r1 = prefix.shape[0], grid.size, suffix.shape[0]
    pts = np.empty((r0, m, r1, dim))
    width = prefix.shape[1]
    pts[..., :width] = prefix[:, None, None, :]
    pts[..., width] = grid[None, :, None]
    pts[..., width + 1 :] = suffix[None, None, :, :]
    counter[0] += r0 * m * r1
    vals = np.asarray(oracle(pts.reshape(-1, dim)), dtype=float)
    return vals.reshape(r0, m, r1)


def _fit_axis(psi: np.ndarray, block: np.ndarray) -> np.ndarray:
    """Least-squares per-axis coefficients of a sampled block."""
    r0, m, r1 = block.shape
    rhs = block.transpose(1, 0, 2).reshape(m, r0 * r1)
    coef, *_ = np.linalg.lstsq(psi, rhs, rcond=None)
    return coef.reshape(-1, r0, r1).transpose(1, 0, 2)


def _apply_inverse(coeffs: np.ndarray, cross_mat: np.ndarray) -> np.ndarray:
    """Contract fitted coefficients with the pseudo-inverse cross matrix."""
    return np.einsum(
        "rib,bq->riq", coeffs, np.linalg.pinv(cross_mat, rcond=_PINV_RCOND), optimize=True
    )


def _core_change(cores, baseline) -> float:
    if baseline is None or len(cores) != len(baseline):
        return np.inf
    if any(c.shape != b.shape for c, b in zip(cores, baseline)):
        return np.inf
    worst = 0.0
    for c, b in zip(cores, baseline):
        denom = np.linalg.norm(b)
        worst = max(worst, np.linalg.norm(c - b) / (denom if denom > 0 else 1.0))
    return worst


def cross_fit(
    oracle,
    basis,
    ranks,
    *,
    oversampling: int | None = None,
    margin: float = 0.1,
    max_sweeps: int = 8,
    stop_tol: float = 1e-9,
    rank_tol: float = 1e-12,
    holdout: int = 256,
    rng: np.random.Generator | int | None = None,
    warm_start: CrossResult | None = None,
) -> CrossResult:
    """Fit a tensor train to ``oracle`` by alternating cross sweeps.

    Parameters
    ----------
    oracle : callable
        Maps points (N, d) to values (N,); must accept large batches.
    basis : sequence of BasisSpec
        Per-axis polynomial spaces and half widths.
    ranks : int or sequence of int
        Requested bond ranks (d - 1 entries); effective ranks may come out
        lower when sample blocks are rank deficient.
    oversampling : int, optional
        Extra collocation nodes per axis beyond n + 1; defaults to n + 1
        (twice as many rows as coefficients).
    holdout : int
        Size of the held-out residual sample; 0 disables the check.
    warm_start : CrossResult, optional
        Reuses right pivots from a previous fit on the same basis and the
        previous cores as the first convergence baseline.
    """
    basis = tuple(basis)
    d = len(basis)
    half = np.array([spec.half_width for spec in basis])
    if rng is None or isinstance(rng, int):
        rng = np.random.default_rng(0 if rng is None else rng)

    grids = []
    tables = []
    for spec in basis:
        count = spec.size + (spec.size if oversampling is None else oversampling)
        nodes, _ = gauss_points(spec, count)
        grids.append(nodes)
        tables.append(eval_basis(spec, nodes / spec.half_width))

    counter = [0]
    holdout_pts = holdout_vals = None
    if holdout:
        holdout_pts = rng.uniform(-half, half, (holdout, d))
        holdout_vals = np.asarray(oracle(holdout_pts), dtype=float)

    def finish(cores, sweeps, converged, right_pivots):
        tt = TtFunction([np.ascontiguousarray(c) for c in cores], basis, margin)
        residual = None
        if holdout:
            err = tt(holdout_pts) - holdout_vals
            scale = np.linalg.norm(holdout_vals)
            residual = float(np.linalg.norm(err) / (scale if scale > 0 else 1.0))
        return CrossResult(
            tt, converged, sweeps, counter[0], holdout or 0, residual, right_pivots
        )

    if d == 1:
        block = _sample_block(
            oracle, np.zeros((1, 0)), grids[0], np.zeros((1, 0)), 1, counter
        )
        return finish([_fit_axis(tables[0], block)], 1, True, [])

    if np.ndim(ranks) == 0:
        ranks = [int(ranks)] * (d - 1)
    ranks = [int(r) for r in ranks]
    if len(ranks) != d - 1:
        raise ValueError(f"need {d - 1} bond ranks for {d} axes, got {len(ranks)}")
    if any(r < 1 for r in ranks):
        raise ValueError("bond ranks must be positive")

    right = []
    if warm_start is not None:
        if warm_start.tt.basis != basis:
            raise ValueError("warm start was fitted on a different basis")
        right = [p.copy() for p in warm_start.right_pivots]
    for k in range(d - 1):
        fresh = rng.uniform(-half[k + 1 :], half[k + 1 :], (ranks[k], d - k - 1))
        if k < len(right):
            missing = ranks[k] - right[k].shape[0]
            if missing > 0:
                right[k] = np.concatenate([right[k], fresh[:missing]])
        else:
            right.append(fresh)

    baseline = [c.copy() for c in warm_start.tt.cores] if warm_start is not None else None
    cores: list[np.ndarray | None] = [None] * d
    left: list[np.ndarray] = [np.zeros((1, 0))] * (d - 1)
    empty = np.zeros((1, 0))

    for sweep in range(1, max_sweeps + 1):
        if sweep % 2 == 1:  # left to right
            prefix = empty
            for k in range(d):
                suffix = right[k] if k < d - 1 else empty
                block = _sample_block(oracle, prefix, grids[k], suffix, d, counter)
                coeffs = _fit_axis(tables[k], block)
                if k == d - 1:
                    cores[k] = coeffs
                    break
                r0, m, r1 = block.shape
                rows, _ = _select_rows(block.reshape(r0 * m, r1), rank_tol)
                a, s = np.divmod(rows, m)
                prefix = np.concatenate([prefix[a], grids[k][s, None]], axis=1)
                left[k] = prefix
                cores[k] = _apply_inverse(coeffs, block.reshape(r0 * m, r1)[rows])
        else:  # right to left
            suffix = empty
            pending = None
            for k in range(d - 1, -1, -1):
                prefix = left[k - 1] if k > 0 else empty
                block = _sample_block(oracle, prefix, grids[k], suffix, d, counter)
                coeffs = _fit_axis(tables[k], block)
                cores[k] = coeffs if pending is None else _apply_inverse(coeffs, pending)
                if k == 0:
                    break
                r0, m, r1 = block.shape
                unfolded = block.reshape(r0, m * r1)
                rows, _ = _select_rows(unfolded.T, rank_tol)
                s, b = np.divmod(rows, r1)
                suffix = np.concatenate([grids[k][s, None], suffix[b]], axis=1)
                right[k - 1] = suffix
                pending = unfolded[:, rows]
        change = _core_change(cores, baseline)
        baseline = [c.copy() for c in cores]
        if change <= stop_tol:
            return finish(cores, sweep, True, right)
    return finish(cores, max_sweeps, False, right)
