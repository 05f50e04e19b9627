"""Closed-form reference solutions.

The motivating linear example couples ``dX = b_s Y ds + c_s dB`` with a
backward equation whose solution is ``Y_s = P_s X_s``, ``P_s = int_t0^s a_r dr``.
In the ``dY = -f ds + Z dB`` convention its driver is
``f(s, x, y, z) = -(a_s x + b_s P_s y)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np

from .model import CoefficientSet, FBSDEProblem, as_profile
from .solver import SolutionEnsemble
from .stochastic import BrownianEnsemble, PathEnsemble, TimeGrid


@dataclass(frozen=True)
class Example1Params:
    a: Any = 1.0
    b: Any = 0.0
    c: Any = 1.0
    t0: float = 0.0
    T: float = 1.0
    xi: float = 1.0
    table_steps: int = 4096

    def __post_init__(self):
        if not self.T > self.t0:
            raise ValueError("T must exceed t0")
        ts = np.linspace(self.t0, self.T, 65)
        for name in ("a", "b", "c"):
            vals = np.array([as_profile(getattr(self, name))(t) for t in ts], dtype=float)
            if not np.all(np.isfinite(vals)):
                raise ValueError(f"profile {name} is not finite on [t0, T]")

    def profiles(self):
        return as_profile(self.a), as_profile(self.b), as_profile(self.c)

    def P(self):
        """``P_s`` by cumulative trapezoid on a fine table, linear in between."""
        a, _, _ = self.profiles()
        ts = np.linspace(self.t0, self.T, self.table_steps + 1)
        av = np.array([float(a(t)) for t in ts])
        cum = np.concatenate([[0.0], np.cumsum(0.5 * (av[1:] + av[:-1]) * np.diff(ts))])
        return lambda t: np.interp(t, ts, cum)


def example1_problem(params: Example1Params) -> FBSDEProblem:
    a, b, c = params.profiles()
    P = params.P()

    def drift(t, x, y, z):
        return float(b(t)) * np.asarray(y) + 0.0 * np.asarray(x)

    def diffusion(t, x, y, z):
        return np.full(np.broadcast_shapes(np.shape(x), np.shape(y)), float(c(t)))

    def driver(t, x, y, z):
        return -(float(a(t)) * np.asarray(x) + float(b(t)) * float(P(t)) * np.asarray(y))

    PT = float(P(params.T))

    def terminal(x):
        return PT * np.asarray(x)

    ts = np.linspace(params.t0, params.T, 65)
    av = np.abs([float(a(t)) for t in ts])
    bv = np.abs([float(b(t)) for t in ts])
    cv = np.abs([float(c(t)) for t in ts])
    Pv = np.abs([float(P(t)) for t in ts])
    K = float(max(av.max(), bv.max(), (bv * Pv).max(), abs(PT)))
    L = float(bv.max() + cv.max() + max(av.max(), (bv * Pv).max()) + abs(PT))
    coef = CoefficientSet(drift, diffusion, driver, terminal, L=L, K=K, L_sigma=0.0,
                          family="example1",
                          params={"a": params.a, "b": params.b, "c": params.c})
    return FBSDEProblem(coef, 1, 1, params.t0, params.T, [params.xi])


def example1_closed_form(params: Example1Params, noise: BrownianEnsemble,
                         xi: float | None = None) -> SolutionEnsemble:
    """Exact solution along ``noise``.

    ``X`` uses the integrating factor ``exp(G_s)``, ``G_s = int b_r P_r dr``
    (trapezoid), with a left-point Ito sum; ``Y = P X`` and ``Z = P c``.
    """
    grid = noise.grid
    if grid.t0 > params.t0 + 1e-12 or grid.T < params.T - 1e-12:
        raise ValueError("noise grid must cover [t0, T]")
    xi = params.xi if xi is None else float(xi)
    _, b, c = params.profiles()
    P = params.P()
    ts = grid.points
    Pv = P(ts)
    bv = np.array([float(b(t)) for t in ts])
    cv = np.array([float(c(t)) for t in ts])
    g = bv * Pv
    G = np.concatenate([[0.0], np.cumsum(0.5 * (g[1:] + g[:-1]) * grid.dt)])
    stoch = np.cumsum(np.exp(-G[:-1]) * cv[:-1] * noise.increments, axis=1)
    X = np.empty((noise.n_paths, grid.n_steps + 1))
    X[:, 0] = xi
    X[:, 1:] = np.exp(G[1:]) * (xi + stoch)
    Y = Pv * X
    Z = np.broadcast_to(Pv * cv, X.shape)
    residual = np.zeros(noise.n_paths)
    prov = {"solver": "example1-closed-form", "seed": noise.seed, "xi": [xi],
            "n_steps": grid.n_steps, "n_paths": noise.n_paths}
    return SolutionEnsemble(PathEnsemble(grid, X), PathEnsemble(grid, Y), PathEnsemble(grid, Z),
                            noise, residual, prov)


def gaussian_linear_oracle(phi_slope: float, grid: TimeGrid, noise: BrownianEnsemble,
                           xi: float) -> SolutionEnsemble:
    """Solution of ``b = f = 0``, ``sigma = 1``, ``Phi(x) = phi_slope x``."""
    if noise.grid != grid:
        raise ValueError("noise must live on grid")
    X = xi + noise.paths()
    Y = phi_slope * X
    Z = np.full_like(X, float(phi_slope))
    prov = {"solver": "gaussian-linear-oracle", "seed": noise.seed, "xi": [float(xi)],
            "n_steps": grid.n_steps, "n_paths": noise.n_paths}
    return SolutionEnsemble(PathEnsemble(grid, X), PathEnsemble(grid, Y), PathEnsemble(grid, Z),
                            noise, np.zeros(noise.n_paths), prov)


def gaussian_linear_problem(phi_slope: float, t0=0.0, T=1.0, xi=0.0) -> FBSDEProblem:
    from .model import affine_problem
    return affine_problem(1, 1, t0, T, [xi], s0=1.0, H=phi_slope)


def backward_residual(solution: SolutionEnsemble, problem: FBSDEProblem) -> np.ndarray:
    """Per-path ``max_k |Y_{k+1} - Y_k + f_k dt_k - Z_k dB_k|``."""
    grid = solution.grid
    X, Y, Z = solution.X.values, solution.Y.values, solution.Z.values
    dB = solution.noise.increments
    out = np.zeros(solution.n_paths)
    for k in range(grid.n_steps):
        f = problem.eval("f", float(grid.points[k]), X[:, k], Y[:, k], Z[:, k])
        r = Y[:, k + 1] - Y[:, k] + f * grid.dt[k] - Z[:, k] * dB[:, k, None]
        out = np.maximum(out, np.linalg.norm(r, axis=-1))
    return out


@dataclass(frozen=True)
class ConvergenceStudy:
    rows: tuple
    order: float
    reference_steps: int
    n_paths: int
    seed: int

    def final_error(self) -> float:
        return self.rows[-1]["rms_error"]


def rms_errors(solution: SolutionEnsemble, exact: SolutionEnsemble) -> dict:
    """Root-mean-square errors over all paths and grid nodes."""
    if solution.grid != exact.grid:
        raise ValueError("solutions live on different grids")
    rms = lambda a, b: float(np.sqrt(np.mean(np.sum((a - b) ** 2, axis=-1))))
    ey = rms(solution.Y.values, exact.Y.values)
    ez = rms(solution.Z.values, exact.Z.values)
    return {"rms_Y": ey, "rms_Z": ez, "rms_error": max(ey, ez)}


def convergence_study(problem: FBSDEProblem, exact, n_steps_list, n_paths: int, seed: int,
                      reference_steps: int | None = None, params=None) -> ConvergenceStudy:
    """Field refinement study against a closed form.

    Every field is run on one fine reference noise whose grid contains all the
    field grids, so the error reflects the time resolution of the field (held
    piecewise constant between its nodes) rather than resampling noise.
    ``exact`` maps a ``BrownianEnsemble`` to the exact ``SolutionEnsemble``.
    The order is minus the least-squares log-log slope.
    """
    from dataclasses import replace

    from .solver import SolverParams, build_decoupling_field, solve_global
    from .stochastic import build_grid, sample_brownian

    steps = sorted(int(n) for n in n_steps_list)
    if not steps or steps[0] < 1:
        raise ValueError("n_steps_list must hold positive integers")
    ref = int(reference_steps or 4 * steps[-1])
    if any(ref % n for n in steps):
        raise ValueError("reference_steps must be a multiple of every n_steps")
    params = params or SolverParams()
    noise = sample_brownian(build_grid(problem.t0, problem.T, ref), n_paths, seed)
    truth = exact(noise)
    rows = []
    for n in steps:
        fld = build_decoupling_field(problem, replace(params, n_steps=n))
        sol = solve_global(problem, fld, noise)
        rows.append({"n_steps": n, **rms_errors(sol, truth), "reference_steps": ref,
                     "n_paths": n_paths, "seed": seed})
    if len(steps) > 1:
        errs = np.array([r["rms_error"] for r in rows])
        order = float(-np.polyfit(np.log(steps), np.log(np.maximum(errs, 1e-300)), 1)[0])
    else:
        order = float("nan")
    return ConvergenceStudy(tuple(rows), order, ref, n_paths, seed)
