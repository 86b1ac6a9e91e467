"""Smoothed policy iteration for mean field games on tensor trains.

The solver treats the coupled system

    -du/dt - nu Lap u + H(grad u) = F(x, m(t)),     u(., T) = G(., m(T)),
     dm/dt - nu Lap m - div(m grad_p H(grad u)) = 0, m(., 0) = m_0,

by iterating, for a smoothed feedback policy qbar,

  1. a forward Fokker-Planck solve with frozen qbar,
  2. a backward linear value solve (policy evaluation)
         -du/dt - nu Lap u + qbar . grad u = F(x, m) + L(qbar),
  3. the policy update q = grad_p H(grad u),
  4. the relaxation qbar <- (1 - delta) qbar + delta q.

Both PDE solves ride on the semi-Lagrangian marchers of
:mod:`ttmfg.propagator`; the characteristic velocity entering them is
``drift_sign * qbar`` with drift_sign = -1 by default, matching the sign
worked out from the characteristics of both equations above.

Policies are stored as gradients of potential trains, never refitted as
vector fields.  For the common H(p) = |p|^2 / 2 the policy is exactly the
potential gradient and the relaxation collapses to a rounded linear
combination of two potentials, keeping cost flat across hundreds of outer
iterations.  Other Hamiltonians fall back to an explicit convex mixture of
raw policies with geometric weight decay and pruning.

Densities may be represented directly or through their logarithm
(``log_density``), in which case the forward step combines cubature nodes
with a signed, floored log-sum-exp so strictly positive output survives
negative cubature weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .basis import BasisSpec
from .cross import cross_fit
from .propagator import (
    MarchConfig,
    backward_feet,
    diffusion_rule,
    march_density,
    march_value,
    scheme_order,
)
from .tt import (
    TtFunction,
    box_first_moments,
    box_integral,
    tt_grad,
    tt_laplacian,
    tt_lincomb,
)

_LOG_FLOOR = 1e-300
_EXP_CAP = 700.0


@dataclass
class MfgProblem:
    """Data of one mean field game on the box [-half_width, half_width]^dim.

    ``coupling`` and ``terminal_value`` receive a :class:`DensityAccessor`
    for the relevant time slice; ``gradient_policy`` asserts that
    grad_p H is the identity (H = |p|^2 / 2), enabling the collapsed policy
    representation.
    """

    dim: int
    half_width: float
    horizon: float
    viscosity: float
    hamiltonian: Callable[[np.ndarray], np.ndarray]
    grad_hamiltonian: Callable[[np.ndarray], np.ndarray]
    lagrangian: Callable[[np.ndarray], np.ndarray]
    coupling: Callable[[np.ndarray, "DensityAccessor"], np.ndarray]
    terminal_value: Callable[[np.ndarray, "DensityAccessor"], np.ndarray]
    initial_density: Callable[[np.ndarray], np.ndarray]
    gradient_policy: bool = True
    policy_ball_radius: float | None = None
    exact_value: Callable[[np.ndarray, float], np.ndarray] | None = None
    exact_density: Callable[[np.ndarray, float], np.ndarray] | None = None

    def __post_init__(self) -> None:
        if self.dim < 1:
            raise ValueError(f"dim must be at least 1, got {self.dim}")
        if self.half_width <= 0 or self.horizon <= 0:
            raise ValueError("half_width and horizon must be positive")
        if self.viscosity < 0:
            raise ValueError(f"viscosity must be non-negative, got {self.viscosity}")


@dataclass
class SolverConfig:
    """Discretization and iteration controls for :func:`solve_mfg`."""

    n_steps: int
    scheme: str = "sl2p"
    delta: float | Callable[[int], float] = 1.0
    stop_tol: float = 1e-5
    max_outer: int = 500
    value_degree: int = 3
    density_degree: int = 3
    value_ranks: int | tuple[int, ...] = 4
    density_ranks: int | tuple[int, ...] = 4
    log_density: bool = False
    value_only: bool = False
    drift_sign: float = -1.0
    margin: float = 0.1
    round_tol: float = 1e-12
    policy_max_rank: int | None = None
    validation_points: int = 4096
    seed: int = 0
    cross: dict = field(default_factory=dict)
    checkpoint: str | None = None

    def __post_init__(self) -> None:
        if self.n_steps < 1:
            raise ValueError(f"n_steps must be at least 1, got {self.n_steps}")
        if self.drift_sign not in (-1.0, 1.0):
            raise ValueError(f"drift_sign must be -1 or +1, got {self.drift_sign}")
        if not callable(self.delta) and not 0.0 < self.delta <= 1.0:
            raise ValueError(f"delta must lie in (0, 1], got {self.delta}")
        if self.max_outer < 1:
            raise ValueError("max_outer must be at least 1")

    def delta_at(self, iteration: int) -> float:
        return self.delta(iteration) if callable(self.delta) else self.delta


@dataclass
class DensityAccessor:
    """One time slice of the population density.

    Wraps either the density train itself or, in log form, the train of its
    logarithm; couplings read whichever representation they need.
    """

    tt: TtFunction
    log_form: bool = False

    def values(self, points) -> np.ndarray:
        raw = self.tt(points)
        if self.log_form:
            return np.exp(np.minimum(raw, _EXP_CAP))
        return raw

    def log_values(self, points) -> np.ndarray:
        raw = self.tt(points)
        if self.log_form:
            return raw
        return np.log(np.maximum(raw, _LOG_FLOOR))

    def _plain_tt(self) -> TtFunction:
        if not self.log_form:
            return self.tt
        rank = max(2, max(self.tt.ranks) + 1)
        fit = cross_fit(
            self.values, self.tt.basis, rank, margin=self.tt.margin, holdout=0
        )
        return fit.tt

    def mass(self) -> float:
        return box_integral(self._plain_tt())

    def first_moments(self) -> np.ndarray:
        """Box integrals of x_k * m(x) dx, the raw first moments."""
        return box_first_moments(self._plain_tt())


class GradientPolicy:
    """Feedback policy q = grad phi for a single potential train."""

    def __init__(self, potential: TtFunction):
        self.potential = potential

    def __call__(self, points) -> np.ndarray:
        return tt_grad(self.potential, points)

    def divergence(self, points) -> np.ndarray:
        return tt_laplacian(self.potential, points)

    def blend(self, potential, delta, tol, max_rank) -> "GradientPolicy":
        mixed = tt_lincomb(
            [1.0 - delta, delta], [self.potential, potential], tol, max_rank=max_rank
        )
        return GradientPolicy(mixed)


class MixturePolicy:
    """Convex combination of raw policies grad_p H(grad u_i).

    The generic fallback when grad_p H is nonlinear: blending cannot be
    collapsed into one potential, so terms accumulate with geometrically
    decaying weights and are pruned below ``prune_tol`` relative weight.
    """

    def __init__(self, grad_hamiltonian, terms, half_width, prune_tol=1e-12):
        self.grad_hamiltonian = grad_hamiltonian
        self.terms = terms
        self.half_width = half_width
        self.prune_tol = prune_tol

    def __call__(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        out = np.zeros_like(points)
        for weight, potential in self.terms:
            out += weight * np.asarray(
                self.grad_hamiltonian(tt_grad(potential, points)), dtype=float
            )
        return out

    def divergence(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        step = 1e-5 * self.half_width
        out = np.zeros(points.shape[0])
        for axis in range(points.shape[1]):
            shift = np.zeros(points.shape[1])
            shift[axis] = step
            out += (self(points + shift)[:, axis] - self(points - shift)[:, axis]) / (
                2.0 * step
            )
        return out

    def blend(self, potential, delta, tol, max_rank) -> "MixturePolicy":
        terms = [(w * (1.0 - delta), u) for w, u in self.terms]
        terms.append((delta, potential))
        top = max(w for w, _ in terms)
        terms = [(w, u) for w, u in terms if w >= self.prune_tol * top]
        return MixturePolicy(self.grad_hamiltonian, terms, self.half_width, self.prune_tol)


@dataclass
class MfgSolution:
    """Output of :func:`solve_mfg`; lists are aligned with ``times``.

    ``sweep_counts`` records the total cross-interpolation sweeps spent in
    each outer iteration; warm starting should keep it from growing after
    the first pass.
    """

    times: np.ndarray
    density: list[DensityAccessor]
    value: list[TtFunction]
    policies: list
    iterations: int
    converged: bool
    residuals: list[float]
    sweep_counts: list[int] = field(default_factory=list)


def _time_index(times: np.ndarray, t: float) -> int:
    dt = times[1] - times[0]
    k = int(round((t - times[0]) / dt))
    if not 0 <= k < len(times) or abs(times[k] - t) > 1e-8 * max(abs(dt), 1.0):
        raise ValueError(f"time {t} is not on the solver grid")
    return k


def _clamp_ball(vectors: np.ndarray, radius: float) -> np.ndarray:
    norms = np.linalg.norm(vectors, axis=1, keepdims=True)
    return vectors * np.minimum(1.0, radius / np.maximum(norms, 1e-30))


def _policy_fields(policies, times, drift_sign, ball_radius):
    """Velocity, reaction and raw-policy callables of the frozen trajectory.

    The characteristic velocity is b = drift_sign * qbar; the Fokker-Planck
    reaction -div b then equals -drift_sign * div qbar.
    """

    def evaluate(points, k):
        q = policies[k](points)
        if ball_radius is not None:
            q = _clamp_ball(q, ball_radius)
        return q

    def velocity(points, t):
        return drift_sign * evaluate(points, _time_index(times, t))

    def reaction(points, t):
        return -drift_sign * policies[_time_index(times, t)].divergence(points)

    return velocity, reaction, evaluate


def log_combination(weights: np.ndarray, exponents: np.ndarray) -> np.ndarray:
    """log of sum_l weights[l] * exp(exponents[l]) over the leading axis.

    Stable for large exponents and tolerant of negative weights: the inner
    sum is floored at a tiny positive value before the logarithm, so a
    cubature rule with negative weights cannot produce a NaN, only a very
    negative log density.
    """
    peak = np.max(exponents, axis=0)
    inner = weights @ np.exp(exponents - peak[None])
    return peak + np.log(np.maximum(inner, _LOG_FLOOR))


def _march_log_density(
    initial: TtFunction, velocity, reaction, times, scheme, viscosity, ranks,
    cross_opts, diagnostics=None,
) -> list[TtFunction]:
    """Forward density marching in log form; returns log-density trains."""
    order = scheme_order(scheme)
    trains = [initial]
    warm = None
    for t_prev, t_next in zip(times[:-1], times[1:]):
        dt = t_next - t_prev
        rule = diffusion_rule(scheme, initial.dim, viscosity, dt)
        current = trains[-1]

        def oracle(pts, current=current, t0=float(t_prev), t1=float(t_next), rule=rule, dt=dt):
            feet = backward_feet(velocity, pts, t0, t1, rule.nodes, order)
            m, n, d = feet.shape
            flat = feet.reshape(-1, d)
            exponents = current(flat).reshape(m, n)
            if reaction is not None:
                r_feet = np.asarray(reaction(flat, t0), dtype=float).reshape(m, n)
                r_here = np.asarray(reaction(pts, t1), dtype=float)
                exponents = exponents + 0.5 * dt * (r_feet + r_here[None])
            return log_combination(rule.weights, exponents)

        warm = cross_fit(
            oracle,
            initial.basis,
            ranks,
            margin=initial.margin,
            warm_start=warm,
            **cross_opts,
        )
        if diagnostics is not None:
            diagnostics.append(warm)
        trains.append(warm.tt)
    return trains


def _save_checkpoint(path, iteration, policies, prev_m, prev_u, residuals) -> None:
    data = {
        "iteration": np.array(iteration),
        "residuals": np.asarray(residuals, dtype=float),
    }
    if prev_m is not None:
        data["prev_m"] = prev_m
        data["prev_u"] = prev_u
    for k, policy in enumerate(policies):
        for j, core in enumerate(policy.potential.cores):
            data[f"phi_{k}_{j}"] = core
    with open(path, "wb") as fh:
        np.savez(fh, **data)


def _load_checkpoint(path, basis, margin, n_slices):
    with np.load(path) as data:
        iteration = int(data["iteration"])
        residuals = list(data["residuals"])
        prev_m = data["prev_m"] if "prev_m" in data else None
        prev_u = data["prev_u"] if "prev_u" in data else None
        policies = []
        for k in range(n_slices):
            cores = []
            j = 0
            while f"phi_{k}_{j}" in data:
                cores.append(data[f"phi_{k}_{j}"])
                j += 1
            policies.append(GradientPolicy(TtFunction(cores, basis, margin)))
    return iteration, policies, prev_m, prev_u, residuals


def solve_mfg(problem: MfgProblem, config: SolverConfig) -> MfgSolution:
    """Run smoothed policy iteration until the consecutive-iterate test passes.

    The stopping residual is || m_n(T) - m_{n-1}(T) ||_2 + || u_n(0) -
    u_{n-1}(0) ||_2, both estimated in L2 over the box from a fixed seeded
    Monte Carlo sample, so the loop never stops on its first pass.
    """
    d, half = problem.dim, problem.half_width
    times = np.linspace(0.0, problem.horizon, config.n_steps + 1)
    value_basis = tuple(BasisSpec(config.value_degree, half) for _ in range(d))
    density_basis = tuple(BasisSpec(config.density_degree, half) for _ in range(d))

    rng = np.random.default_rng(config.seed)
    val_pts = rng.uniform(-half, half, (config.validation_points, d))
    volume = (2.0 * half) ** d

    if config.log_density:
        def m0_oracle(pts):
            return np.log(
                np.maximum(np.asarray(problem.initial_density(pts), float), _LOG_FLOOR)
            )
    else:
        m0_oracle = problem.initial_density
    m0_tt = cross_fit(
        m0_oracle, density_basis, config.density_ranks, margin=config.margin,
        **config.cross,
    ).tt

    def fit_terminal(accessor: DensityAccessor, diagnostics=None) -> TtFunction:
        fit = cross_fit(
            lambda pts: problem.terminal_value(pts, accessor),
            value_basis,
            config.value_ranks,
            margin=config.margin,
            **config.cross,
        )
        if diagnostics is not None:
            diagnostics.append(fit)
        return fit.tt

    def make_policy(potential: TtFunction):
        if problem.gradient_policy:
            return GradientPolicy(potential)
        return MixturePolicy(problem.grad_hamiltonian, [(1.0, potential)], half)

    terminal_tt = fit_terminal(DensityAccessor(m0_tt, config.log_density))
    start_iteration = 0
    prev_m_vals = prev_u_vals = None
    residuals: list[float] = []
    sweep_counts: list[int] = []
    policies = [make_policy(terminal_tt) for _ in times]

    if config.checkpoint and Path(config.checkpoint).exists():
        if not problem.gradient_policy:
            raise ValueError("checkpointing requires the gradient policy form")
        start_iteration, policies, prev_m_vals, prev_u_vals, residuals = _load_checkpoint(
            config.checkpoint, value_basis, config.margin, len(times)
        )

    fp_march = MarchConfig(
        scheme=config.scheme,
        viscosity=problem.viscosity,
        ranks=config.density_ranks,
        cross=config.cross,
    )
    hjb_march = MarchConfig(
        scheme=config.scheme,
        viscosity=problem.viscosity,
        ranks=config.value_ranks,
        cross=config.cross,
    )

    densities: list[DensityAccessor] = []
    values: list[TtFunction] = []
    converged = False
    iteration = start_iteration

    for iteration in range(start_iteration, config.max_outer):
        velocity, reaction, policy_eval = _policy_fields(
            policies, times, config.drift_sign, problem.policy_ball_radius
        )
        fits: list = []

        if config.value_only:
            # the cost does not read the density; keep the initial fit at
            # every time level and skip the forward march entirely
            densities = [
                DensityAccessor(m0_tt, config.log_density) for _ in times
            ]
        elif config.log_density:
            trains = _march_log_density(
                m0_tt, velocity, reaction, times, config.scheme,
                problem.viscosity, config.density_ranks, config.cross, fits,
            )
            densities = [DensityAccessor(tt, config.log_density) for tt in trains]
        else:
            trains = march_density(m0_tt, velocity, reaction, times, fp_march, fits)
            densities = [DensityAccessor(tt, config.log_density) for tt in trains]

        terminal_tt = fit_terminal(densities[-1], fits)

        def source(pts, t, densities=densities, policy_eval=policy_eval):
            k = _time_index(times, t)
            return np.asarray(
                problem.coupling(pts, densities[k]), dtype=float
            ) + np.asarray(problem.lagrangian(policy_eval(pts, k)), dtype=float)

        values = march_value(terminal_tt, velocity, source, times, hjb_march, fits)
        sweep_counts.append(sum(fit.n_sweeps for fit in fits))

        m_vals = densities[-1].values(val_pts)
        u_vals = values[0](val_pts)
        if prev_m_vals is not None:
            residual = float(
                np.sqrt(volume * np.mean((m_vals - prev_m_vals) ** 2))
                + np.sqrt(volume * np.mean((u_vals - prev_u_vals) ** 2))
            )
            residuals.append(residual)
            if residual <= config.stop_tol:
                converged = True
                break
        prev_m_vals, prev_u_vals = m_vals, u_vals

        delta = config.delta_at(iteration)
        policies = [
            policy.blend(u_tt, delta, config.round_tol, config.policy_max_rank)
            for policy, u_tt in zip(policies, values)
        ]

        if config.checkpoint:
            if problem.gradient_policy:
                _save_checkpoint(
                    config.checkpoint, iteration + 1, policies,
                    prev_m_vals, prev_u_vals, residuals,
                )

    return MfgSolution(
        times=times,
        density=densities,
        value=values,
        policies=policies,
        iterations=iteration + 1,
        converged=converged,
        residuals=residuals,
        sweep_counts=sweep_counts,
    )
