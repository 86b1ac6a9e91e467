"""Semi-Lagrangian transport steps and time marchers on tensor trains.

The two building blocks discretize, on one time slab [t_k, t_{k+1}],

* a conservative advection-diffusion (Fokker-Planck) step for a density m,

      d m/dt + div(m b) = nu Lap m,

  marched forward via backward characteristic feet; the reaction
  r = -div b (supplied explicitly by the caller) enters through an
  exponential integrating factor, trapezoidal at second order,

      m_{k+1}(x) = sum_l w_l m_k(foot_l(x))
                   * exp(dt/2 * (r(foot_l(x), t_k) + r(x, t_{k+1}))),

  and rectangle at first order, exp(dt * r(x, t_{k+1}));

* a value (policy-evaluation) step for u, marched backward via forward feet:

      -d u/dt - nu Lap u - b . grad u = f,

      u_k(x) = sum_l w_l [u_{k+1}(foot_l(x)) + dt/2 * f(foot_l(x), t_{k+1})]
               + dt/2 * f(x, t_k)

  at second order, with the first-order variant again collapsing the
  trapezoid onto the far end: sum_l w_l [u_{k+1} + dt * f](foot_l(x), t_{k+1}).

The two orders differ in the feet as well: first order uses a plain Euler
displacement, second order the trapezoidal (Crank-Nicolson style) two-stage
displacement with the cubature increment injected already at the predictor.
In-step time quadrature always matches the foot order, so the first-order
step evaluates every field at the t_{k+1} end of the characteristic segment
only.  The diffusion expectation runs over the rules of
:mod:`ttmfg.cubature`; zero viscosity degenerates to a single noise-free
foot.

``march_density`` and ``march_value`` advance a train across a whole time
grid, refitting by cross interpolation after every step and chaining warm
starts so pivot sets persist along the trajectory.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cross import CrossResult, cross_fit
from .cubature import CubatureRule, deterministic_rule, make_rule
from .tt import TtFunction, wrap_periodic

SCHEMES = ("sl1", "sl2e", "sl2p")


def scheme_order(scheme: str) -> int:
    """Foot order of a scheme tag: 1 for sl1, 2 for the sl2 family."""
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")
    return 1 if scheme == "sl1" else 2


def diffusion_rule(scheme: str, dim: int, nu: float, dt: float) -> CubatureRule:
    """Cubature rule of a scheme for one step; deterministic when nu = 0."""
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")
    if nu < 0:
        raise ValueError(f"viscosity must be non-negative, got {nu}")
    variance = 2.0 * nu * dt
    if variance == 0.0:
        return deterministic_rule(dim)
    return make_rule(scheme, dim, variance)


def _velocity_batch(velocity, points: np.ndarray, t: float) -> np.ndarray:
    vel = np.asarray(velocity(points, t), dtype=float)
    if vel.shape != points.shape:
        raise ValueError(
            f"velocity returned shape {vel.shape} for points {points.shape}"
        )
    return vel


def backward_feet(velocity, points, t_prev, t_next, increments, order: int) -> np.ndarray:
    """Feet of backward characteristics through each point, one per node.

    Returns an array (M, N, d) for increments (M, d) and points (N, d).
    ``velocity`` may be None for pure diffusion.
    """
    points = np.asarray(points, dtype=float)
    increments = np.asarray(increments, dtype=float)
    dt = t_next - t_prev
    if dt <= 0:
        raise ValueError(f"need t_next > t_prev, got dt = {dt}")
    if velocity is None:
        return points[None] + increments[:, None, :]
    vel_here = _velocity_batch(velocity, points, t_next)
    predictor = points[None] - dt * vel_here[None] + increments[:, None, :]
    if order == 1:
        return predictor
    m, n, d = predictor.shape
    vel_foot = _velocity_batch(
        velocity, predictor.reshape(-1, d), t_prev
    ).reshape(m, n, d)
    return points[None] - 0.5 * dt * (vel_here[None] + vel_foot) + increments[:, None, :]


def forward_feet(velocity, points, t_prev, t_next, increments, order: int) -> np.ndarray:
    """Feet of forward characteristics; mirror image of :func:`backward_feet`."""
    points = np.asarray(points, dtype=float)
    increments = np.asarray(increments, dtype=float)
    dt = t_next - t_prev
    if dt <= 0:
        raise ValueError(f"need t_next > t_prev, got dt = {dt}")
    if velocity is None:
        return points[None] + increments[:, None, :]
    vel_here = _velocity_batch(velocity, points, t_prev)
    predictor = points[None] + dt * vel_here[None] + increments[:, None, :]
    if order == 1:
        return predictor
    m, n, d = predictor.shape
    vel_foot = _velocity_batch(
        velocity, predictor.reshape(-1, d), t_next
    ).reshape(m, n, d)
    return points[None] + 0.5 * dt * (vel_here[None] + vel_foot) + increments[:, None, :]


def fp_step(
    density,
    velocity,
    reaction,
    points,
    t_prev: float,
    t_next: float,
    rule: CubatureRule,
    order: int,
    wrap_half=None,
) -> np.ndarray:
    """One forward density step; ``density`` evaluates m(., t_prev).

    ``reaction`` is r(points, t) = -div b, or None when the velocity is
    divergence free.  ``wrap_half`` enables periodic wrapping of the feet
    before any evaluation (used by problems posed on a torus).
    """
    points = np.asarray(points, dtype=float)
    dt = t_next - t_prev
    feet = backward_feet(velocity, points, t_prev, t_next, rule.nodes, order)
    m, n, d = feet.shape
    flat = feet.reshape(-1, d)
    if wrap_half is not None:
        flat = wrap_periodic(flat, wrap_half)
    values = np.asarray(density(flat), dtype=float).reshape(m, n)
    if reaction is not None:
        if order == 1:
            r_here = np.asarray(reaction(points, t_next), dtype=float)
            values = values * np.exp(dt * r_here[None])
        else:
            r_feet = np.asarray(reaction(flat, t_prev), dtype=float).reshape(m, n)
            r_here = np.asarray(reaction(points, t_next), dtype=float)
            values = values * np.exp(0.5 * dt * (r_feet + r_here[None]))
    return rule.weights @ values


def hjb_step(
    value,
    velocity,
    source,
    points,
    t_prev: float,
    t_next: float,
    rule: CubatureRule,
    order: int,
    wrap_half=None,
) -> np.ndarray:
    """One backward value step; ``value`` evaluates u(., t_next)."""
    points = np.asarray(points, dtype=float)
    dt = t_next - t_prev
    feet = forward_feet(velocity, points, t_prev, t_next, rule.nodes, order)
    m, n, d = feet.shape
    flat = feet.reshape(-1, d)
    if wrap_half is not None:
        flat = wrap_periodic(flat, wrap_half)
    values = np.asarray(value(flat), dtype=float).reshape(m, n)
    if source is not None:
        weight = dt if order == 1 else 0.5 * dt
        values = values + weight * np.asarray(
            source(flat, t_next), dtype=float
        ).reshape(m, n)
    out = rule.weights @ values
    if source is not None and order != 1:
        out = out + 0.5 * dt * np.asarray(source(points, t_prev), dtype=float)
    return out


@dataclass
class MarchConfig:
    """Time-marching options shared by the density and value drivers."""

    scheme: str = "sl2p"
    viscosity: float = 0.0
    ranks: int | tuple[int, ...] = 4
    wrap: bool = False
    cross: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.scheme not in SCHEMES:
            raise ValueError(
                f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}"
            )


def _check_times(times) -> np.ndarray:
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or times.size < 2:
        raise ValueError("times must be a 1-d grid with at least two entries")
    if np.any(np.diff(times) <= 0):
        raise ValueError("times must be strictly increasing")
    return times


def march_density(
    initial: TtFunction, velocity, reaction, times, config: MarchConfig,
    diagnostics: list | None = None,
) -> list[TtFunction]:
    """Advance a density train over the whole grid; returns one train per time.

    Pass a list as ``diagnostics`` to collect the per-step cross-fit results.
    """
    times = _check_times(times)
    order = scheme_order(config.scheme)
    half = initial.half_widths if config.wrap else None
    trains = [initial]
    warm: CrossResult | None = None
    for t_prev, t_next in zip(times[:-1], times[1:]):
        rule = diffusion_rule(
            config.scheme, initial.dim, config.viscosity, t_next - t_prev
        )
        current = trains[-1]

        def oracle(pts, current=current, t0=float(t_prev), t1=float(t_next), rule=rule):
            return fp_step(
                current, velocity, reaction, pts, t0, t1, rule, order, wrap_half=half
            )

        warm = cross_fit(
            oracle,
            initial.basis,
            config.ranks,
            margin=initial.margin,
            warm_start=warm,
            **config.cross,
        )
        if diagnostics is not None:
            diagnostics.append(warm)
        trains.append(warm.tt)
    return trains


def march_value(
    terminal: TtFunction, velocity, source, times, config: MarchConfig,
    diagnostics: list | None = None,
) -> list[TtFunction]:
    """March a value train backward; entry i of the result matches times[i]."""
    times = _check_times(times)
    order = scheme_order(config.scheme)
    half = terminal.half_widths if config.wrap else None
    trains: list[TtFunction] = [terminal]
    warm: CrossResult | None = None
    for t_next, t_prev in zip(times[::-1][:-1], times[::-1][1:]):
        rule = diffusion_rule(
            config.scheme, terminal.dim, config.viscosity, t_next - t_prev
        )
        current = trains[-1]

        def oracle(pts, current=current, t0=float(t_prev), t1=float(t_next), rule=rule):
            return hjb_step(
                current, velocity, source, pts, t0, t1, rule, order, wrap_half=half
            )

        warm = cross_fit(
            oracle,
            terminal.basis,
            config.ranks,
            margin=terminal.margin,
            warm_start=warm,
            **config.cross,
        )
        if diagnostics is not None:
            diagnostics.append(warm)
        trains.append(warm.tt)
    trains.reverse()
    return trains
