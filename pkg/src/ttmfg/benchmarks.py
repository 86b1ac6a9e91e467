"""Benchmark problems with closed-form solutions, plus the measurement kit.

Four problem families are exposed, each addressable by name from the CLI:

``advdiff``
    Pure transport-diffusion of a trigonometric density under a constant
    drift on the torus.  The exact solution decays by half over the default
    horizon.  Used for convergence ladders of the density march alone.
``positivity``
    The same transport problem with the baseline lowered so the exact
    density touches zero at known probe points at the final time.  The
    probed minimum of the numerical density measures the undershoot.
``local-mfg``
    Entropic game on a box: quadratic Hamiltonian, running cost
    ``gamma ln m + beta |x|^2 / 2``, stationary Gaussian density and a
    value function that is quadratic in space and linear in time.  With
    ``gamma = 0`` the value equation decouples and doubles as the
    HJB-only test (including the grid-reference comparison).
``nonlocal-mfg``
    Linear-quadratic game where the running cost penalises distance to
    the population mean.  The density stays Gaussian with a mean that
    never moves, which makes mass and first-moment conservation easy to
    measure against closed forms.

The measurement kit covers relative L2/uniform errors on a seeded
validation cloud, observed convergence orders, the positivity probe,
conservation defects, a dense-grid semi-Lagrangian reference solver for
d <= 3, and least-squares scaling fits of CPU times against dimension.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np
from scipy.interpolate import RegularGridInterpolator
from scipy.special import erf

from .propagator import hjb_step, diffusion_rule
from .solver import MfgProblem

__all__ = [
    "ValidationSet",
    "ExactSolutionPair",
    "TransportBenchmark",
    "ErrorPair",
    "ScalingFit",
    "advection_diffusion_problem",
    "positivity_problem",
    "positivity_probe_points",
    "local_mfg_problem",
    "nonlocal_mfg_problem",
    "relative_errors",
    "compute_errors",
    "convergence_order",
    "positivity_probe",
    "conservation_defects",
    "grid_sl_reference",
    "fit_scaling",
]

#: default size of the validation cloud used by every error table
DEFAULT_VALIDATION_POINTS = 100_000


@dataclass(frozen=True)
class ValidationSet:
    """Seeded uniform cloud on [-L, L]^d shared by all error evaluations."""

    points: np.ndarray
    seed: int

    @classmethod
    def draw(cls, dim: int, half_width: float,
             n_points: int = DEFAULT_VALIDATION_POINTS,
             seed: int = 1) -> "ValidationSet":
        rng = np.random.default_rng(seed)
        pts = rng.uniform(-half_width, half_width, size=(n_points, dim))
        return cls(points=pts, seed=seed)

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class ExactSolutionPair:
    """Closed-form value/density pair backing one benchmark family.

    ``value`` may be None for transport-only problems.  ``policy`` is the
    exact feedback q*(x, t), available where the value is.  ``box_mass``
    and ``box_moments`` integrate the exact density over the truncated
    box (closed forms, not quadrature), used by the conservation checks.
    """

    label: str
    density: Callable[[np.ndarray, float], np.ndarray]
    value: Callable[[np.ndarray, float], np.ndarray] | None = None
    policy: Callable[[np.ndarray, float], np.ndarray] | None = None
    box_mass: Callable[[float], float] | None = None
    box_moments: Callable[[float], np.ndarray] | None = None


@dataclass(frozen=True)
class TransportBenchmark:
    """A density march with a known solution and no value equation."""

    dim: int
    half_width: float
    horizon: float
    viscosity: float
    velocity: Callable[[np.ndarray, float], np.ndarray]
    initial_density: Callable[[np.ndarray], np.ndarray]
    exact: ExactSolutionPair
    wrap: bool = True


# ---------------------------------------------------------------------------
# problem families
# ---------------------------------------------------------------------------

def advection_diffusion_problem(dim: int, nu: float = 0.1,
                                baseline: float = 2.0,
                                stagger: bool = True,
                                horizon: float | None = None) -> TransportBenchmark:
    """Constant-drift transport of a trigonometric density on the torus.

    The density ``baseline + sin(pi sum(x_i - t - s_i)) exp(-nu pi^2 d t)``
    solves the forward equation with unit drift in every axis.  The axis
    offsets ``s_i = (i - 1)/d`` keep the initial profile asymmetric; pass
    ``stagger=False`` for the aligned variant used by the positivity
    probe.  The default horizon halves the oscillation amplitude.
    """
    if dim < 1:
        raise ValueError(f"dim must be >= 1, got {dim}")
    if nu <= 0:
        raise ValueError(f"this family needs nu > 0, got {nu}")
    if horizon is None:
        horizon = math.log(2.0) / (dim * nu * math.pi**2)
    offsets = (np.arange(dim) / dim) if stagger else np.zeros(dim)
    decay_rate = nu * math.pi**2 * dim

    def density(pts: np.ndarray, t: float) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        phase = math.pi * np.sum(pts - t - offsets, axis=-1)
        return baseline + np.sin(phase) * math.exp(-decay_rate * t)

    def velocity(pts: np.ndarray, t: float) -> np.ndarray:
        return np.ones_like(np.asarray(pts, dtype=float))

    def box_mass(t: float) -> float:
        # the sine of a sum integrates to zero over the symmetric box
        return baseline * 2.0**dim

    def box_moments(t: float) -> np.ndarray:
        if dim > 1:
            return np.zeros(dim)
        phi = -math.pi * (t + offsets[0])
        return np.array([(2.0 / math.pi) * math.cos(phi)
                         * math.exp(-decay_rate * t)])

    exact = ExactSolutionPair(
        label="advdiff",
        density=density,
        box_mass=box_mass,
        box_moments=box_moments,
    )
    return TransportBenchmark(
        dim=dim,
        half_width=1.0,
        horizon=horizon,
        viscosity=nu,
        velocity=velocity,
        initial_density=lambda pts: density(pts, 0.0),
        exact=exact,
    )


def positivity_problem(dim: int = 8, nu: float = 0.1) -> TransportBenchmark:
    """Aligned transport variant whose exact final density touches zero."""
    return advection_diffusion_problem(dim, nu, baseline=0.5, stagger=False)


def positivity_probe_points(dim: int, horizon: float) -> np.ndarray:
    """Diagonal points where the exact final density vanishes.

    With the aligned profile the final-time density is
    ``0.5 (1 + sin(pi d (s - horizon)))`` along the diagonal x = (s, ..., s);
    the returned eight points hit the -1 troughs exactly when
    ``horizon = log 2 / (d nu pi^2)`` and d = 8.
    """
    ks = np.arange(-4, 4)
    s = horizon + ks / 4.0 - 1.0 / 16.0
    return np.repeat(s[:, None], dim, axis=1)


def local_mfg_problem(dim: int, nu: float = 1.0, beta: float = 1.0,
                      gamma: float = 0.1, half_width: float = 1.0,
                      horizon: float = 1.0) -> tuple[MfgProblem, ExactSolutionPair]:
    """Entropic game with a stationary Gaussian equilibrium.

    The coupled system with Hamiltonian |p|^2/2 and running cost
    ``gamma ln m + beta |x|^2 / 2`` has the invariant density
    ``(a/2 pi nu)^{d/2} exp(-a |x|^2 / 2 nu)`` and the value
    ``a |x|^2 / 2 - (nu d a + (gamma d / 2) ln(a / 2 pi nu)) t`` where
    ``a = (-gamma + sqrt(gamma^2 + 4 nu^2 beta)) / (2 nu)``.  Setting
    ``gamma = 0`` removes the density coupling entirely, which is the
    HJB-only configuration.
    """
    if nu <= 0:
        raise ValueError(f"need nu > 0, got {nu}")
    disc = gamma**2 + 4.0 * nu**2 * beta
    if disc < 0:
        raise ValueError(f"gamma^2 + 4 nu^2 beta must be >= 0, got {disc}")
    alpha = (-gamma + math.sqrt(disc)) / (2.0 * nu)
    if alpha <= 0:
        raise ValueError(f"equilibrium rate must be positive, got {alpha}")
    log_norm = 0.5 * dim * math.log(alpha / (2.0 * math.pi * nu))
    drift_const = nu * dim * alpha + gamma * 0.5 * dim * math.log(
        alpha / (2.0 * math.pi * nu))

    def value(pts: np.ndarray, t: float) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        return 0.5 * alpha * np.sum(pts**2, axis=-1) - drift_const * t

    def density(pts: np.ndarray, t: float) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        expo = log_norm - 0.5 * alpha * np.sum(pts**2, axis=-1) / nu
        return np.exp(expo)

    def policy(pts: np.ndarray, t: float) -> np.ndarray:
        return alpha * np.asarray(pts, dtype=float)

    def box_mass(t: float) -> float:
        return erf(half_width * math.sqrt(0.5 * alpha / nu)) ** dim

    def coupling(pts: np.ndarray, density_acc) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        quad = 0.5 * beta * np.sum(pts**2, axis=-1)
        if gamma == 0.0:
            return quad
        return gamma * density_acc.log_values(pts) + quad

    problem = MfgProblem(
        dim=dim,
        half_width=half_width,
        horizon=horizon,
        viscosity=nu,
        hamiltonian=lambda p: 0.5 * np.sum(p**2, axis=-1),
        grad_hamiltonian=lambda p: p,
        lagrangian=lambda q: 0.5 * np.sum(q**2, axis=-1),
        coupling=coupling,
        terminal_value=lambda pts, density_acc: value(pts, horizon),
        initial_density=lambda pts: density(pts, 0.0),
        exact_value=value,
        exact_density=density,
    )
    exact = ExactSolutionPair(
        label="local-mfg",
        density=density,
        value=value,
        policy=policy,
        box_mass=box_mass,
        box_moments=lambda t: np.zeros(dim),
    )
    return problem, exact


def nonlocal_mfg_problem(dim: int = 3, nu: float = 0.0,
                         mu0: float | Sequence[float] = 0.1,
                         sigma0: float = 0.5, half_width: float = 2.5,
                         horizon: float = 0.25) -> tuple[MfgProblem, ExactSolutionPair]:
    """Game with a mean-reversion cost ``|x - mean(m)|^2 / 2``.

    The equilibrium density stays Gaussian with constant mean and an
    axis-wise variance that contracts toward the horizon; the value is
    quadratic with coefficient ``tanh(T - t)``.  Zero terminal cost.
    ``sigma0`` is the per-axis standard deviation of the initial Gaussian
    (so the default 0.5 means variance 0.25); with the default box the
    tails carry about 1e-6 of the mass, keeping truncation effects well
    below the discretization errors this family is meant to expose.
    """
    mean = np.broadcast_to(np.asarray(mu0, dtype=float), (dim,)).copy()
    if sigma0 <= 0:
        raise ValueError(f"need sigma0 > 0, got {sigma0}")
    T = horizon
    var0 = sigma0**2

    def variance(t: float) -> float:
        ch = math.cosh(T - t)
        shrink = var0 * ch**2 / math.cosh(T) ** 2
        spread = 2.0 * nu * ch**2 * (math.tanh(T) - math.tanh(T - t))
        return shrink + spread

    def value(pts: np.ndarray, t: float) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        pi_t = math.tanh(T - t)
        quad = 0.5 * pi_t * np.sum((pts - mean) ** 2, axis=-1)
        return quad + nu * dim * math.log(math.cosh(T - t))

    def policy(pts: np.ndarray, t: float) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        return math.tanh(T - t) * (pts - mean)

    def density(pts: np.ndarray, t: float) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        var = variance(t)
        expo = -0.5 * np.sum((pts - mean) ** 2, axis=-1) / var
        norm = (2.0 * math.pi * var) ** (-0.5 * dim)
        return norm * np.exp(expo)

    def _axis_mass(t: float) -> np.ndarray:
        sd = math.sqrt(variance(t))
        hi = (half_width - mean) / (sd * math.sqrt(2.0))
        lo = (-half_width - mean) / (sd * math.sqrt(2.0))
        return 0.5 * (erf(hi) - erf(lo))

    def box_mass(t: float) -> float:
        return float(np.prod(_axis_mass(t)))

    def box_moments(t: float) -> np.ndarray:
        var = variance(t)
        sd = math.sqrt(var)
        masses = _axis_mass(t)
        pdf_hi = np.exp(-0.5 * ((half_width - mean) / sd) ** 2) / (
            sd * math.sqrt(2.0 * math.pi))
        pdf_lo = np.exp(-0.5 * ((-half_width - mean) / sd) ** 2) / (
            sd * math.sqrt(2.0 * math.pi))
        axis_first = mean * masses - var * (pdf_hi - pdf_lo)
        total = np.prod(masses)
        # first moment of the product measure: swap one axis mass for its
        # first moment, keep the others
        return axis_first * total / np.where(masses == 0.0, 1.0, masses)

    def coupling(pts: np.ndarray, density_acc) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        center = np.asarray(density_acc.first_moments(), dtype=float)
        return 0.5 * np.sum((pts - center) ** 2, axis=-1)

    problem = MfgProblem(
        dim=dim,
        half_width=half_width,
        horizon=horizon,
        viscosity=nu,
        hamiltonian=lambda p: 0.5 * np.sum(p**2, axis=-1),
        grad_hamiltonian=lambda p: p,
        lagrangian=lambda q: 0.5 * np.sum(q**2, axis=-1),
        coupling=coupling,
        terminal_value=lambda pts, density_acc: np.zeros(len(pts)),
        initial_density=lambda pts: density(pts, 0.0),
        exact_value=value,
        exact_density=density,
    )
    exact = ExactSolutionPair(
        label="nonlocal-mfg",
        density=density,
        value=value,
        policy=policy,
        box_mass=box_mass,
        box_moments=box_moments,
    )
    return problem, exact


# ---------------------------------------------------------------------------
# error metrics
# ---------------------------------------------------------------------------

class ErrorPair(NamedTuple):
    """Relative L2 and uniform errors over a validation cloud.

    ``absolute`` marks an identically-zero exact field (the L2 entry is
    then an absolute norm and the uniform entry is NaN).  ``n_guarded``
    counts validation points whose exact magnitude sits below 1e-9 of
    the field scale; they are reported, never silently dropped.
    """

    e2: float
    einf: float
    absolute: bool = False
    n_guarded: int = 0


def relative_errors(approx: np.ndarray, exact: np.ndarray) -> ErrorPair:
    approx = np.asarray(approx, dtype=float).ravel()
    exact = np.asarray(exact, dtype=float).ravel()
    if approx.shape != exact.shape:
        raise ValueError(
            f"shape mismatch: {approx.shape} vs {exact.shape}")
    diff = approx - exact
    denom = float(np.sum(exact**2))
    scale = float(np.max(np.abs(exact))) if exact.size else 0.0
    if denom == 0.0:
        return ErrorPair(
            e2=float(np.sqrt(np.sum(diff**2))),
            einf=float("nan"),
            absolute=True,
        )
    e2 = float(np.sqrt(np.sum(diff**2) / denom))
    guard = 1e-12 * scale
    einf = float(np.max(np.abs(diff)) / max(scale, guard))
    n_guarded = int(np.count_nonzero(np.abs(exact) < 1e-9 * scale))
    return ErrorPair(e2=e2, einf=einf, n_guarded=n_guarded)


def compute_errors(numeric: Callable[[np.ndarray], np.ndarray],
                   exact: Callable[[np.ndarray], np.ndarray],
                   vset: ValidationSet) -> ErrorPair:
    """Evaluate both fields on the cloud and form the relative errors."""
    exact_vals = np.asarray(exact(vset.points), dtype=float)
    if not np.any(exact_vals):
        raise ValueError(
            "exact field vanishes on the whole validation set; the uniform "
            "error is undefined (use relative_errors for the absolute norm)")
    return relative_errors(numeric(vset.points), exact_vals)


def convergence_order(errors: Sequence[float]) -> np.ndarray:
    """Observed orders log2(e_i / e_{i+1}) for a halving ladder.

    Non-positive entries yield NaN in the affected slots rather than an
    exception, so stalled ladders stay visible in reports.
    """
    e = np.asarray(errors, dtype=float)
    if e.size < 2:
        raise ValueError("need at least two errors to measure an order")
    out = np.full(e.size - 1, np.nan)
    ok = (e[:-1] > 0) & (e[1:] > 0)
    out[ok] = np.log2(e[:-1][ok] / e[1:][ok])
    return out


def positivity_probe(density: Callable[[np.ndarray], np.ndarray],
                     probes: np.ndarray) -> float:
    """Minimum of the numerical density over the probe points."""
    vals = np.asarray(density(np.asarray(probes, dtype=float)), dtype=float)
    return float(np.min(vals))


def conservation_defects(density, exact_mass: float,
                         exact_moments: np.ndarray) -> tuple[float, float]:
    """Mass and first-moment defects of a fitted density.

    ``density`` is anything exposing ``mass()`` and ``first_moments()``
    (the solver's accessor does); a bare TT train works too.
    """
    if hasattr(density, "mass"):
        mass = float(density.mass())
        moments = np.asarray(density.first_moments(), dtype=float)
    else:
        from .tt import box_integral, box_first_moments
        mass = float(box_integral(density))
        moments = np.asarray(box_first_moments(density), dtype=float)
    e_mass = abs(mass - float(exact_mass))
    e_mom = float(np.linalg.norm(moments - np.asarray(exact_moments, float)))
    return e_mass, e_mom


# ---------------------------------------------------------------------------
# dense-grid reference solver (cross-validation for d <= 3)
# ---------------------------------------------------------------------------

def grid_sl_reference(problem: MfgProblem, n: int, n_steps: int,
                      vset: ValidationSet, scheme: str = "sl1",
                      interp: str = "cubic", max_outer: int = 30,
                      stop_tol: float = 1e-9) -> ErrorPair:
    """Policy iteration for the value equation on a dense Cartesian grid.

    Same time rule and feet as the tensor path, with the value carried on
    an ``n``-per-axis grid and interpolated at the feet.  Serves as an
    independent cross-check of the tensor pipeline in low dimension;
    refuses d > 3 outright (the grid would not fit in memory at any
    useful resolution).
    """
    d = problem.dim
    if d > 3:
        raise ValueError(f"grid reference is limited to d <= 3, got {d}")
    if problem.exact_value is None:
        raise ValueError("grid reference needs the exact value for scoring")
    L = problem.half_width
    axes = [np.linspace(-L, L, n) for _ in range(d)]
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
    times = np.linspace(0.0, problem.horizon, n_steps + 1)
    order = 1 if scheme == "sl1" else 2

    def interpolator(values_flat: np.ndarray):
        grid_vals = values_flat.reshape((n,) * d)
        itp = RegularGridInterpolator(
            axes, grid_vals, method=interp, bounds_error=False, fill_value=None)
        return lambda pts: itp(pts)

    def gradient_field(values_flat: np.ndarray) -> np.ndarray:
        grid_vals = values_flat.reshape((n,) * d)
        spacing = axes[0][1] - axes[0][0]
        grads = np.gradient(grid_vals, spacing, edge_order=2)
        if d == 1:
            grads = [grads]
        return np.stack([g.reshape(-1) for g in grads], axis=-1)

    class _StaticDensity:
        """Placeholder accessor; only valid when the coupling ignores m."""

        def log_values(self, pts):
            raise ValueError("grid reference only covers density-free costs")

        def first_moments(self):
            raise ValueError("grid reference only covers density-free costs")

    static_density = _StaticDensity()
    terminal = np.asarray(
        problem.terminal_value(mesh, static_density), dtype=float)
    # one policy field per time level, all seeded from the terminal gradient
    policy_levels = [gradient_field(terminal)] * (n_steps + 1)

    def _policy_lookup(t: float):
        idx = int(round((t - times[0]) / (times[1] - times[0])))
        return interpolator_vec(axes, policy_levels[idx], n, d, interp)

    u_levels = [terminal] * (n_steps + 1)
    for _ in range(max_outer):
        new_levels = [None] * (n_steps + 1)
        new_levels[-1] = terminal
        for k in range(n_steps - 1, -1, -1):
            t_prev, t_next = float(times[k]), float(times[k + 1])
            rule = diffusion_rule(scheme, d, problem.viscosity, t_next - t_prev)
            value_itp = interpolator(new_levels[k + 1])

            def source(pts, t):
                qbar = _policy_lookup(t)(pts)
                run = np.asarray(
                    problem.coupling(pts, static_density), dtype=float)
                return run + np.asarray(problem.lagrangian(qbar), dtype=float)

            def velocity(pts, t):
                return -_policy_lookup(t)(pts)

            new_levels[k] = hjb_step(
                value_itp, velocity, source, mesh, t_prev, t_next, rule, order)
        change = float(np.max(np.abs(new_levels[0] - u_levels[0])))
        u_levels = new_levels
        policy_levels = [gradient_field(u) for u in u_levels]
        if change <= stop_tol * max(1.0, float(np.max(np.abs(u_levels[0])))):
            break

    final_itp = interpolator(u_levels[0])
    return compute_errors(
        lambda pts: final_itp(pts),
        lambda pts: problem.exact_value(pts, 0.0),
        vset,
    )


def interpolator_vec(axes, field_flat: np.ndarray, n: int, d: int,
                     interp: str):
    """Componentwise grid interpolator for a vector field."""
    comps = [
        RegularGridInterpolator(
            axes, field_flat[:, i].reshape((n,) * d), method=interp,
            bounds_error=False, fill_value=None)
        for i in range(d)
    ]
    return lambda pts: np.stack([c(pts) for c in comps], axis=-1)


# ---------------------------------------------------------------------------
# scaling fits
# ---------------------------------------------------------------------------

class ScalingFit(NamedTuple):
    a: float
    b: float
    r2: float


def _line_fit(x: np.ndarray, y: np.ndarray) -> tuple[float, float, float]:
    design = np.stack([np.ones_like(x), x], axis=-1)
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    resid = y - design @ coef
    total = float(np.sum((y - y.mean()) ** 2))
    if total == 0.0:
        return float(coef[0]), float(coef[1]), float("nan")
    r2 = 1.0 - float(np.sum(resid**2)) / total
    return float(coef[0]), float(coef[1]), r2


def fit_scaling(dims: Sequence[float],
                times: Sequence[float]) -> dict[str, ScalingFit]:
    """Exponential and power-law fits of CPU time against dimension.

    Least squares in the transformed coordinates: semi-log for
    ``a exp(b d)`` and log-log for ``a d^b``.  R^2 is computed in the
    same coordinates, matching how the preference between the two
    models is usually judged.
    """
    d = np.asarray(dims, dtype=float)
    c = np.asarray(times, dtype=float)
    if d.size != c.size:
        raise ValueError("dims and times must have matching lengths")
    if d.size < 3:
        raise ValueError("need at least three (d, time) pairs to fit")
    if np.any(c <= 0) or np.any(d <= 0):
        raise ValueError("dimensions and times must be positive")
    log_c = np.log(c)
    inter_e, slope_e, r2_e = _line_fit(d, log_c)
    inter_p, slope_p, r2_p = _line_fit(np.log(d), log_c)
    return {
        "exponential": ScalingFit(a=math.exp(inter_e), b=slope_e, r2=r2_e),
        "power": ScalingFit(a=math.exp(inter_p), b=slope_p, r2=r2_p),
    }
