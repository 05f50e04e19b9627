"""Decoupling-field solver for fully coupled FBSDEs.

The field ``u(t, x)`` is built backwards on a tensor spatial grid. Each grid
step ``[t1, t2]`` is solved node by node with a Picard iteration on the pair
``(y, z)``: one Euler step of the forward equation from the node, then

    y = E[u(t2, X_t2)] + f(t1, x, y, z) h,    z = E[u(t2, X_t2) dB] / h,

with both expectations taken by Gauss-Hermite quadrature over the Gaussian
increment. Steps are grouped into stitching blocks no longer than ``delta``;
a step whose Picard iteration stops contracting is split in half until it
contracts or falls below the step floor.

``solve_global`` then runs Euler-Maruyama forwards with ``Y = u(s, X)`` and
``Z = Du(s, X) sigma``.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import NonFiniteStateError, PicardDivergenceError
from .model import FBSDEProblem
from .stochastic import BrownianEnsemble, PathEnsemble, TimeGrid, build_grid

logger = logging.getLogger(__name__)

_STEP_FLOOR = 1e-6


@dataclass(frozen=True)
class SpatialGrid:
    center: float | Sequence[float] = 0.0
    half_width: float | Sequence[float] = 4.0
    n_nodes: int | Sequence[int] = 41

    def axes(self, n: int) -> tuple:
        c = np.broadcast_to(np.asarray(self.center, dtype=float), (n,))
        w = np.broadcast_to(np.asarray(self.half_width, dtype=float), (n,))
        k = np.broadcast_to(np.asarray(self.n_nodes, dtype=int), (n,))
        if np.any(k < 3):
            raise ValueError("spatial grids need at least 3 nodes per axis")
        if np.any(w <= 0):
            raise ValueError("half_width must be positive")
        return tuple(np.linspace(ci - wi, ci + wi, int(ki)) for ci, wi, ki in zip(c, w, k))


@dataclass(frozen=True)
class SolverParams:
    delta_scale: float = 0.25
    picard_tol: float = 1e-10
    picard_max_iter: int = 50
    spatial_grid: SpatialGrid = field(default_factory=SpatialGrid)
    quadrature_nodes: int = 10
    contraction_guard: float = 0.9
    n_steps: int = 64

    def __post_init__(self):
        if not self.delta_scale > 0:
            raise ValueError("delta_scale must be positive")
        if not self.picard_tol > 0:
            raise ValueError("picard_tol must be positive")
        if self.picard_max_iter < 1:
            raise ValueError("picard_max_iter must be at least 1")
        if self.quadrature_nodes < 2:
            raise ValueError("quadrature_nodes must be at least 2")
        if not 0 < self.contraction_guard < 1:
            raise ValueError("contraction_guard must lie in (0, 1)")
        if self.n_steps < 1:
            raise ValueError("n_steps must be at least 1")

    def as_dict(self) -> dict:
        g = self.spatial_grid
        return {"delta_scale": self.delta_scale, "picard_tol": self.picard_tol,
                "picard_max_iter": self.picard_max_iter,
                "quadrature_nodes": self.quadrature_nodes,
                "contraction_guard": self.contraction_guard, "n_steps": self.n_steps,
                "spatial_grid": {"center": _plain(g.center), "half_width": _plain(g.half_width),
                                 "n_nodes": _plain(g.n_nodes)}}


def _plain(v):
    return np.asarray(v).tolist()


def choose_delta(K: float, L_sigma: float, params: SolverParams, T_minus_t0: float) -> float:
    """Stitching block length ``min(horizon, c / (1 + K^2))``."""
    if K < 0 or L_sigma < 0:
        raise ValueError("K and L_sigma must be non-negative")
    return min(float(T_minus_t0), params.delta_scale / (1.0 + K * K))


def gauss_hermite(order: int):
    """Nodes and weights for E[g(N(0, 1))]."""
    x, w = np.polynomial.hermite_e.hermegauss(order)
    return x, w / math.sqrt(2.0 * math.pi)


# ----------------------------------------------------------------------------
# tensor-grid interpolation, linear extrapolation outside the grid


def _cells(axes, x):
    idx, frac, width = [], [], []
    for i, a in enumerate(axes):
        xi = x[..., i]
        j = np.clip(np.searchsorted(a, xi, side="right") - 1, 0, len(a) - 2)
        dx = a[j + 1] - a[j]
        idx.append(j)
        frac.append((xi - a[j]) / dx)
        width.append(dx)
    return idx, frac, width


def interpolate(axes, values, x) -> np.ndarray:
    """Multilinear interpolation of ``values`` (shape ``(*grid, m)``) at ``x``."""
    idx, frac, _ = _cells(axes, x)
    out = 0.0
    for corner in itertools.product((0, 1), repeat=len(axes)):
        wgt = 1.0
        for c, fr in zip(corner, frac):
            wgt = wgt * (fr if c else 1.0 - fr)
        v = values[tuple(j + c for j, c in zip(idx, corner))]
        out = out + wgt[..., None] * v
    return out


def interpolate_jacobian(axes, values, x) -> np.ndarray:
    """Jacobian ``du/dx`` of the interpolant, shape ``(..., m, n)``."""
    idx, frac, width = _cells(axes, x)
    d = len(axes)
    cols = []
    for i in range(d):
        acc = 0.0
        for corner in itertools.product((0, 1), repeat=d):
            wgt = (1.0 if corner[i] else -1.0) / width[i]
            for j, (c, fr) in enumerate(zip(corner, frac)):
                if j != i:
                    wgt = wgt * (fr if c else 1.0 - fr)
            v = values[tuple(k + c for k, c in zip(idx, corner))]
            acc = acc + np.asarray(wgt)[..., None] * v
        cols.append(acc)
    return np.stack(cols, axis=-1)


# ----------------------------------------------------------------------------
# decoupling field


@dataclass(frozen=True, eq=False)
class DecouplingField:
    """Values of ``u(t_i, x_j)`` on a time grid times a tensor spatial grid.

    Between time nodes the field is held at the latest node not after ``t``;
    in space it is multilinear with linear continuation past the boundary.
    """

    grid: TimeGrid
    axes: tuple
    values: np.ndarray
    z_values: np.ndarray
    blocks: tuple = ()
    delta: float = float("nan")
    iterations: np.ndarray | None = None
    ratios: np.ndarray | None = None
    substeps: np.ndarray | None = None
    terminal_interp_error: float = 0.0
    warnings: tuple = ()
    params: dict = field(default_factory=dict)

    @property
    def times(self) -> np.ndarray:
        return self.grid.points

    @property
    def n(self) -> int:
        return len(self.axes)

    @property
    def m(self) -> int:
        return self.values.shape[-1]

    def nodes(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([g.ravel() for g in mesh], axis=-1)

    def time_index(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        tol = 1e-12 * max(1.0, abs(self.grid.T))
        i = np.searchsorted(self.times, t + tol, side="right") - 1
        return np.clip(i, 0, self.grid.n_steps)

    def value_at(self, i: int, x) -> np.ndarray:
        return interpolate(self.axes, self.values[i], np.asarray(x, dtype=float))

    def slope_at(self, i: int, x) -> np.ndarray:
        return interpolate_jacobian(self.axes, self.values[i], np.asarray(x, dtype=float))

    def __call__(self, t: float, x) -> np.ndarray:
        return self.value_at(int(self.time_index(t)), x)

    def slice(self, i: int) -> Callable[[np.ndarray], np.ndarray]:
        return lambda x: self.value_at(i, x)

    def covers(self, x) -> np.ndarray:
        x = np.asarray(x)
        inside = np.ones(x.shape[:-1], dtype=bool)
        for i, a in enumerate(self.axes):
            inside &= (x[..., i] >= a[0]) & (x[..., i] <= a[-1])
        return inside


@dataclass(frozen=True)
class LocalSolution:
    """Outcome of the Picard iteration at one or more nodes on ``[t1, t2]``."""

    t1: float
    t2: float
    u: np.ndarray
    z: np.ndarray
    x_images: np.ndarray
    iterations: int
    ratio: float
    converged: bool


def _picard(problem: FBSDEProblem, t1: float, t2: float, x: np.ndarray,
            next_fn: Callable, params: SolverParams, q_nodes, q_weights,
            y0=None, z0=None) -> LocalSolution:
    h = t2 - t1
    sq = math.sqrt(h)
    y = np.array(next_fn(x), dtype=float) if y0 is None else np.array(y0, dtype=float)
    z = np.zeros_like(y) if z0 is None else np.array(z0, dtype=float)
    scale = 1.0 + float(np.max(np.abs(y), initial=0.0))
    prev = None
    worst = 0.0
    ratio = 0.0
    for it in range(1, params.picard_max_iter + 1):
        drift = problem.eval("b", t1, x, y, z)
        vol = problem.eval("sigma", t1, x, y, z)
        images = x[:, None, :] + drift[:, None, :] * h + vol[:, None, :] * (sq * q_nodes)[None, :, None]
        U = next_fn(images)
        EU = np.einsum("q,nqm->nm", q_weights, U)
        y_new = EU + problem.eval("f", t1, x, y, z) * h
        z_new = np.einsum("q,nqm->nm", q_weights * q_nodes, U) / sq
        diff = max(float(np.max(np.abs(y_new - y), initial=0.0)),
                   sq * float(np.max(np.abs(z_new - z), initial=0.0)))
        if not np.isfinite(diff):
            return LocalSolution(t1, t2, y_new, z_new, images, it, math.inf, False)
        if prev is not None and prev > 1e3 * np.finfo(float).eps * scale:
            ratio = diff / prev
            worst = max(worst, ratio)
        y, z = y_new, z_new
        if diff < params.picard_tol:
            return LocalSolution(t1, t2, y, z, images, it, ratio if it > 1 else 0.0, True)
        if worst >= params.contraction_guard:
            return LocalSolution(t1, t2, y, z, images, it, worst, False)
        prev = diff
    return LocalSolution(t1, t2, y, z, images, params.picard_max_iter, worst, False)


def solve_local_picard(problem: FBSDEProblem, interval, terminal_field: Callable, x0,
                       params: SolverParams | None = None) -> LocalSolution:
    """Single-node Picard solve on ``interval`` against ``u(t2, .)``.

    Raises ``PicardDivergenceError`` when the iteration does not converge.
    """
    params = params or SolverParams()
    t1, t2 = map(float, interval)
    if not t2 > t1:
        raise ValueError("interval must have positive length")
    delta = choose_delta(problem.coefficients.K, problem.coefficients.L_sigma,
                         params, problem.horizon)
    if t2 - t1 > delta * (1 + 1e-12):
        raise ValueError(f"interval length {t2 - t1} exceeds delta={delta}")
    x = np.atleast_2d(np.asarray(x0, dtype=float)).reshape(-1, problem.n)
    qn, qw = gauss_hermite(params.quadrature_nodes)
    sol = _picard(problem, t1, t2, x, terminal_field, params, qn, qw)
    if not sol.converged:
        raise PicardDivergenceError(
            f"Picard iteration on [{t1}, {t2}] failed (ratio {sol.ratio:.3g}, "
            f"{sol.iterations} iterations)")
    return sol


def _stitch_blocks(grid: TimeGrid, delta: float) -> tuple:
    """Group grid steps, from the horizon backwards, into blocks of length <= delta."""
    pts = grid.points
    blocks = []
    end = grid.n_steps
    k = end
    while k > 0:
        if pts[end] - pts[k - 1] <= delta * (1 + 1e-12) or k == end:
            k -= 1
            continue
        blocks.append((float(pts[k]), float(pts[end])))
        end = k
    blocks.append((float(pts[0]), float(pts[end])))
    return tuple(reversed(blocks))


def build_decoupling_field(problem: FBSDEProblem, params: SolverParams | None = None,
                           grid: TimeGrid | None = None) -> DecouplingField:
    """Backward induction of the decoupling field on ``grid``."""
    params = params or SolverParams()
    if problem.n > 2 or problem.m > 2:
        raise ValueError("the decoupling-field solver supports n, m <= 2")
    grid = grid or build_grid(problem.t0, problem.T, params.n_steps)
    if abs(grid.t0 - problem.t0) > 1e-12 or abs(grid.T - problem.T) > 1e-12:
        raise ValueError("grid must span the problem horizon")
    coef = problem.coefficients
    delta = choose_delta(coef.K, coef.L_sigma, params, problem.horizon)
    floor = _STEP_FLOOR * problem.horizon
    axes = params.spatial_grid.axes(problem.n)
    shape = tuple(len(a) for a in axes)
    mesh = np.meshgrid(*axes, indexing="ij")
    nodes = np.stack([g.ravel() for g in mesh], axis=-1)
    qn, qw = gauss_hermite(params.quadrature_nodes)
    m = problem.m

    N = grid.n_steps
    values = np.empty((N + 1,) + shape + (m,))
    z_values = np.zeros((N + 1,) + shape + (m,))
    values[N] = problem.eval_phi(nodes).reshape(shape + (m,))
    if not np.all(np.isfinite(values[N])):
        raise NonFiniteStateError(-1, N, "terminal value")
    iterations = np.zeros(N, dtype=int)
    ratios = np.zeros(N)
    substeps = np.zeros(N, dtype=int)
    boundary = np.zeros(shape, dtype=bool)
    for i, n_i in enumerate(shape):
        sl = [slice(None)] * len(shape)
        sl[i] = 0
        boundary[tuple(sl)] = True
        sl[i] = n_i - 1
        boundary[tuple(sl)] = True
    boundary = boundary.ravel()
    escapes = 0

    def solve_span(t1, t2, next_vals):
        """Returns (values at t1, z at t1, iterations, worst ratio, n substeps)."""
        nonlocal escapes
        h = t2 - t1
        pieces = max(1, math.ceil(h / delta - 1e-12))
        if pieces > 1:
            cuts = np.linspace(t1, t2, pieces + 1)
            vals, its, worst, count, zv = next_vals, 0, 0.0, 0, None
            for a, b in zip(cuts[-2::-1], cuts[:0:-1]):
                vals, zv, i_, r_, c_ = solve_span(a, b, vals)
                its, worst, count = its + i_, max(worst, r_), count + c_
            return vals, zv, its, worst, count
        next_fn = lambda x: interpolate(axes, next_vals, x)
        sol = _picard(problem, t1, t2, nodes, next_fn, params, qn, qw)
        if sol.converged:
            img = sol.x_images[boundary]
            lo = np.array([a[0] for a in axes])
            hi = np.array([a[-1] for a in axes])
            if np.any((img < lo) | (img > hi)):
                escapes += 1
            return (sol.u.reshape(shape + (m,)), sol.z.reshape(shape + (m,)),
                    sol.iterations, sol.ratio, 1)
        if h / 2 < floor:
            raise PicardDivergenceError(
                f"Picard iteration failed on [{t1:.6g}, {t2:.6g}] with step at its floor "
                f"(ratio {sol.ratio:.3g} after {sol.iterations} iterations)")
        mid = 0.5 * (t1 + t2)
        vmid, _, i2, r2, c2 = solve_span(mid, t2, next_vals)
        v1, z1, i1, r1, c1 = solve_span(t1, mid, vmid)
        return v1, z1, i1 + i2, max(r1, r2), c1 + c2

    for k in range(N - 1, -1, -1):
        t1, t2 = float(grid.points[k]), float(grid.points[k + 1])
        values[k], z_values[k], iterations[k], ratios[k], substeps[k] = \
            solve_span(t1, t2, values[k + 1])
        if not np.all(np.isfinite(values[k])):
            raise NonFiniteStateError(-1, k, "field value")

    warnings = []
    if escapes:
        warnings.append(f"grid-escape: Euler images of boundary nodes left the spatial "
                        f"grid on {escapes} step(s); linear extrapolation used")
        logger.info(warnings[-1])

    # midpoint error of the terminal interpolant, used as the terminal tolerance
    mids = np.stack([g.ravel() for g in np.meshgrid(
        *[0.5 * (a[:-1] + a[1:]) for a in axes], indexing="ij")], axis=-1)
    interp_err = float(np.max(np.abs(problem.eval_phi(mids) - interpolate(axes, values[N], mids))))

    for arr in (values, z_values, iterations, ratios, substeps):
        arr.flags.writeable = False
    return DecouplingField(grid=grid, axes=axes, values=values, z_values=z_values,
                           blocks=_stitch_blocks(grid, delta), delta=delta,
                           iterations=iterations, ratios=ratios, substeps=substeps,
                           terminal_interp_error=interp_err, warnings=tuple(warnings),
                           params=params.as_dict())


def field_lipschitz_profile(field: DecouplingField) -> np.ndarray:
    """Largest difference quotient between adjacent spatial nodes, per time node."""
    if any(len(a) < 2 for a in field.axes):
        raise ValueError("need at least two spatial nodes")
    out = np.zeros(len(field.times))
    for i, a in enumerate(field.axes):
        du = np.diff(field.values, axis=1 + i)
        shape = [1] * field.values.ndim
        shape[1 + i] = len(a) - 1
        q = np.linalg.norm(du, axis=-1) / np.diff(a).reshape(shape[:-1])
        out = np.maximum(out, q.reshape(len(field.times), -1).max(axis=1))
    return out


# ----------------------------------------------------------------------------
# global forward solve


@dataclass(frozen=True, eq=False)
class SolutionEnsemble:
    X: PathEnsemble
    Y: PathEnsemble
    Z: PathEnsemble
    noise: BrownianEnsemble
    terminal_residual: np.ndarray
    provenance: dict = field(default_factory=dict)
    warnings: tuple = ()

    @property
    def grid(self) -> TimeGrid:
        return self.X.grid

    @property
    def n_paths(self) -> int:
        return self.X.n_paths

    @property
    def seed(self) -> int:
        return self.noise.seed


def _check_finite(arr, k, what):
    bad = ~np.all(np.isfinite(arr), axis=-1)
    if np.any(bad):
        raise NonFiniteStateError(int(np.argmax(bad)), k, what)


def solve_global(problem: FBSDEProblem, field: DecouplingField, noise: BrownianEnsemble,
                 xi=None) -> SolutionEnsemble:
    """Euler-Maruyama for X with ``Y = u(s, X)`` and ``Z = Du(s, X) sigma``.

    ``sigma`` is first evaluated with the previous step's Z and then once more
    with the fresh Z (one inner fixed-point pass).
    """
    if not noise.grid.contains(field.grid):
        raise ValueError("field time nodes must be points of the noise grid")
    grid = noise.grid
    xi = problem.xi if xi is None else np.atleast_1d(np.asarray(xi, dtype=float))
    P, N, n, m = noise.n_paths, grid.n_steps, problem.n, problem.m
    X = np.empty((P, N + 1, n))
    Y = np.empty((P, N + 1, m))
    Z = np.empty((P, N + 1, m))
    X[:, 0] = xi
    idx = field.time_index(grid.points)
    dt = grid.dt
    z_prev = np.zeros((P, m))
    outside = 0
    for k in range(N + 1):
        t = float(grid.points[k])
        x = X[:, k]
        outside += int(np.count_nonzero(~field.covers(x)))
        y = field.value_at(idx[k], x)
        J = field.slope_at(idx[k], x)
        vol = problem.eval("sigma", t, x, y, z_prev)
        z = np.einsum("pmn,pn->pm", J, vol)
        vol = problem.eval("sigma", t, x, y, z)
        z = np.einsum("pmn,pn->pm", J, vol)
        _check_finite(y, k, "Y")
        _check_finite(z, k, "Z")
        Y[:, k], Z[:, k] = y, z
        if k < N:
            drift = problem.eval("b", t, x, y, z)
            X[:, k + 1] = x + drift * dt[k] + vol * noise.increments[:, k, None]
            _check_finite(X[:, k + 1], k + 1, "X")
        z_prev = z
    residual = np.linalg.norm(Y[:, N] - problem.eval_phi(X[:, N]), axis=-1)
    warnings = list(field.warnings)
    frac = outside / (P * (N + 1))
    if frac > 0.01:
        warnings.append(f"field-coverage: {100 * frac:.2f}% of X samples outside the spatial grid")
        logger.warning(warnings[-1])
    prov = {"solver": "decoupling-field", "params": field.params, "seed": noise.seed,
            "n_steps": N, "n_paths": P, "field_n_steps": field.grid.n_steps,
            "xi": xi.tolist()}
    return SolutionEnsemble(PathEnsemble(grid, X), PathEnsemble(grid, Y), PathEnsemble(grid, Z),
                            noise, residual, prov, tuple(warnings))
