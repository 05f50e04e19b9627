"""Time grids, seeded Brownian increments and path containers.

Randomness is counter based: path ``i`` of an ensemble with key ``seed`` is
drawn from ``Philox(key=seed, counter=[0, 0, 0, i])``, so any single path can
be regenerated without touching the others and results never depend on the
order in which paths are visited.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import HorizonOrderError, NonFiniteStateError, ZeroStepsError

_MASK64 = (1 << 64) - 1


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype)
    a.flags.writeable = False
    return a


def substream_seed(seed: int, name: str) -> int:
    """Derive the 64-bit key of the named sub-stream of ``seed``.

    Adding a new consumer name never changes the keys of existing ones.
    """
    ss = np.random.SeedSequence([int(seed) & _MASK64, zlib.crc32(name.encode())])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


@dataclass(frozen=True, eq=False)
class TimeGrid:
    t0: float
    T: float
    n_steps: int
    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 1 or len(pts) != self.n_steps + 1:
            raise ValueError("points must hold n_steps + 1 times")
        if not np.all(np.diff(pts) > 0):
            raise HorizonOrderError("grid points must be strictly increasing")
        object.__setattr__(self, "points", _frozen(pts))

    @classmethod
    def from_points(cls, points) -> TimeGrid:
        pts = np.asarray(points, dtype=float)
        if len(pts) < 2:
            raise ZeroStepsError("a grid needs at least one step")
        return cls(float(pts[0]), float(pts[-1]), len(pts) - 1, pts)

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.points)

    @property
    def horizon(self) -> float:
        return self.T - self.t0

    def is_uniform(self, rtol=1e-12) -> bool:
        d = self.dt
        return bool(np.allclose(d, d[0], rtol=rtol, atol=0.0))

    def contains(self, other: TimeGrid, atol=1e-12) -> bool:
        """True when every point of ``other`` is also a point of this grid."""
        idx = np.searchsorted(self.points, other.points - atol)
        idx = np.clip(idx, 0, self.n_steps)
        return bool(np.all(np.abs(self.points[idx] - other.points) <= atol))

    def index_of(self, times, atol=1e-12) -> np.ndarray:
        times = np.atleast_1d(np.asarray(times, dtype=float))
        idx = np.clip(np.searchsorted(self.points, times - atol), 0, self.n_steps)
        if np.any(np.abs(self.points[idx] - times) > atol):
            raise ValueError("times are not grid points")
        return idx

    def __eq__(self, other):
        if not isinstance(other, TimeGrid):
            return NotImplemented
        return self.n_steps == other.n_steps and np.array_equal(self.points, other.points)

    __hash__ = None


def build_grid(t0: float, T: float, n_steps: int) -> TimeGrid:
    """Uniform grid with ``n_steps + 1`` points on ``[t0, T]``."""
    if not T > t0:
        raise HorizonOrderError(f"horizon end T={T} must exceed t0={t0}")
    if int(n_steps) < 1:
        raise ZeroStepsError("n_steps must be at least 1")
    n_steps = int(n_steps)
    pts = t0 + (T - t0) * np.arange(n_steps + 1) / n_steps
    pts[-1] = T
    return TimeGrid(float(t0), float(T), n_steps, pts)


def _standard_normals(key: int, n_paths: int, n_draws: int) -> np.ndarray:
    out = np.empty((n_paths, n_draws))
    for i in range(n_paths):
        gen = np.random.Generator(np.random.Philox(key=key & _MASK64, counter=[0, 0, 0, i]))
        out[i] = gen.standard_normal(n_draws)
    return out


@dataclass(frozen=True, eq=False)
class BrownianEnsemble:
    grid: TimeGrid
    n_paths: int
    seed: int
    increments: np.ndarray
    antithetic: bool = False

    def __post_init__(self):
        inc = np.asarray(self.increments, dtype=float)
        if inc.shape != (self.n_paths, self.grid.n_steps):
            raise ValueError("increments must have shape (n_paths, n_steps)")
        object.__setattr__(self, "increments", _frozen(inc))

    def paths(self) -> np.ndarray:
        """Brownian values at the grid points, ``B[:, 0] = 0``."""
        out = np.zeros((self.n_paths, self.grid.n_steps + 1))
        np.cumsum(self.increments, axis=1, out=out[:, 1:])
        return out

    def coarsen(self, factor: int) -> BrownianEnsemble:
        """Sum consecutive blocks of ``factor`` increments."""
        if self.grid.n_steps % factor:
            raise ValueError("factor must divide n_steps")
        grid = TimeGrid.from_points(self.grid.points[::factor])
        inc = self.increments.reshape(self.n_paths, grid.n_steps, factor).sum(axis=2)
        return BrownianEnsemble(grid, self.n_paths, self.seed, inc, self.antithetic)

    def refine(self) -> BrownianEnsemble:
        """Halve every step by Brownian-bridge sampling of the midpoints.

        The bridge normals come from their own sub-stream, so summing paired
        fine increments reproduces the coarse increments.
        """
        pts = self.grid.points
        mid = 0.5 * (pts[:-1] + pts[1:])
        fine_pts = np.empty(2 * self.grid.n_steps + 1)
        fine_pts[0::2] = pts
        fine_pts[1::2] = mid
        h = self.grid.dt
        key = substream_seed(self.seed, f"bridge/{self.grid.n_steps}")
        eta = _standard_normals(key, self.n_paths, self.grid.n_steps)
        first = 0.5 * self.increments + 0.5 * np.sqrt(h) * eta
        inc = np.empty((self.n_paths, 2 * self.grid.n_steps))
        inc[:, 0::2] = first
        inc[:, 1::2] = self.increments - first
        return BrownianEnsemble(TimeGrid.from_points(fine_pts), self.n_paths,
                                self.seed, inc, self.antithetic)

    def same_noise(self, other: BrownianEnsemble) -> bool:
        return (self.seed == other.seed and self.antithetic == other.antithetic
                and self.grid == other.grid and self.n_paths == other.n_paths)


def sample_brownian(grid: TimeGrid, n_paths: int, seed: int) -> BrownianEnsemble:
    """Independent N(0, dt_k) increments per path and step, keyed by ``seed``."""
    if int(n_paths) < 1:
        raise ValueError("n_paths must be at least 1")
    z = _standard_normals(int(seed), int(n_paths), grid.n_steps)
    return BrownianEnsemble(grid, int(n_paths), int(seed), z * np.sqrt(grid.dt))


def antithetic_pair(ensemble: BrownianEnsemble) -> BrownianEnsemble:
    return BrownianEnsemble(ensemble.grid, ensemble.n_paths, ensemble.seed,
                            -ensemble.increments, not ensemble.antithetic)


@dataclass(frozen=True, eq=False)
class PathEnsemble:
    """Per-path, per-node vector values, shape ``(n_paths, n_steps + 1, dim)``."""

    grid: TimeGrid
    values: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 2:
            v = v[:, :, None]
        if v.ndim != 3 or v.shape[1] != self.grid.n_steps + 1:
            raise ValueError("values must have shape (n_paths, n_steps + 1, dim)")
        bad = ~np.isfinite(v)
        if bad.any():
            path, step, _ = np.argwhere(bad)[0]
            raise NonFiniteStateError(int(path), int(step), "value")
        object.__setattr__(self, "values", _frozen(v))

    @property
    def n_paths(self) -> int:
        return self.values.shape[0]

    @property
    def dimension(self) -> int:
        return self.values.shape[2]

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.values)))
