"""Fully coupled FBSDE problems and empirical checks of their regularity.

Sign convention follows the backward line ``dY = -f(s, X, Y, Z) ds + Z dB``.
Coefficient maps are vectorised over leading axes: ``b(t, x, y, z)`` receives
``x`` of shape ``(..., n)`` and ``y``, ``z`` of shape ``(..., m)`` and returns
shape ``(..., n)``; ``phi(x)`` returns ``(..., m)``. Time is a scalar.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .errors import CoefficientEvaluationError, HorizonOrderError
from .stochastic import substream_seed

Coefficient = Callable[..., np.ndarray]


@dataclass(frozen=True, eq=False)
class CoefficientSet:
    b: Coefficient
    sigma: Coefficient
    f: Coefficient
    phi: Callable[[np.ndarray], np.ndarray]
    L: float = 0.0
    K: float = 0.0
    L_sigma: float = 0.0
    family: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("L", "K", "L_sigma"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"declared constant {name} must be non-negative")


@dataclass(frozen=True, eq=False)
class FBSDEProblem:
    coefficients: CoefficientSet
    n: int
    m: int
    t0: float
    T: float
    xi: np.ndarray

    def __post_init__(self):
        if not self.T > self.t0:
            raise HorizonOrderError(f"T={self.T} must exceed t0={self.t0}")
        xi = np.atleast_1d(np.asarray(self.xi, dtype=float))
        if xi.shape != (self.n,):
            raise ValueError(f"xi must have shape ({self.n},), got {xi.shape}")
        xi.flags.writeable = False
        object.__setattr__(self, "xi", xi)
        self._check_dimensions()

    def _check_dimensions(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((3, self.n))
        y = rng.standard_normal((3, self.m))
        z = rng.standard_normal((3, self.m))
        for t in (self.t0, self.T):
            shapes = {
                "b": (self.eval("b", t, x, y, z).shape, (3, self.n)),
                "sigma": (self.eval("sigma", t, x, y, z).shape, (3, self.n)),
                "f": (self.eval("f", t, x, y, z).shape, (3, self.m)),
                "phi": (self.eval_phi(x).shape, (3, self.m)),
            }
            for name, (got, want) in shapes.items():
                if got != want:
                    raise ValueError(f"{name} returned shape {got}, expected {want}")

    def eval(self, name: str, t, x, y, z) -> np.ndarray:
        out = np.asarray(getattr(self.coefficients, name)(t, x, y, z), dtype=float)
        lead = np.broadcast_shapes(np.shape(x)[:-1], np.shape(y)[:-1], np.shape(z)[:-1])
        width = self.n if name in ("b", "sigma") else self.m
        try:
            return np.broadcast_to(out, lead + (width,))
        except ValueError:
            raise ValueError(f"{name} returned shape {out.shape}, expected "
                             f"{lead + (width,)}") from None

    def eval_phi(self, x) -> np.ndarray:
        out = np.asarray(self.coefficients.phi(x), dtype=float)
        want = np.shape(x)[:-1] + (self.m,)
        try:
            return np.broadcast_to(out, want)
        except ValueError:
            raise ValueError(f"phi returned shape {out.shape}, expected {want}") from None

    def with_xi(self, xi) -> FBSDEProblem:
        return replace(self, xi=np.atleast_1d(np.asarray(xi, dtype=float)))

    @property
    def horizon(self) -> float:
        return self.T - self.t0


# ----------------------------------------------------------------------------
# assumption probing


@dataclass(frozen=True)
class AssumptionReport:
    L_hat: float
    K_b: float
    K_sigma_xy: float
    L_sigma_z: float
    K_f: float
    K_phi: float
    n_probes: int
    box_radius: float
    records: dict
    violations: tuple

    @property
    def K_hat(self) -> float:
        return max(self.K_b, self.K_sigma_xy, self.K_f, self.K_phi)

    def as_dict(self) -> dict:
        return {
            "L_hat": self.L_hat, "K_b": self.K_b, "K_sigma_xy": self.K_sigma_xy,
            "L_sigma_z": self.L_sigma_z, "K_f": self.K_f, "K_phi": self.K_phi,
            "K_hat": self.K_hat, "n_probes": self.n_probes,
            "box_radius": self.box_radius, "violations": list(self.violations),
            "records": self.records,
        }


def _checked(values, name, t, pts):
    values = np.asarray(values, dtype=float)
    bad = ~np.all(np.isfinite(values), axis=-1)
    if np.any(bad):
        i = int(np.argmax(bad))
        point = {"t": t, **{k: v[i].tolist() for k, v in pts.items()}}
        raise CoefficientEvaluationError(name, point)
    return values


def _uniform(seed, tag, n, d, radius):
    rng = np.random.default_rng(substream_seed(seed, tag))
    return radius * (2.0 * rng.random((n, d)) - 1.0)


def probe_assumptions(problem: FBSDEProblem, n_probes: int, box_radius: float,
                      seed: int, n_times: int = 5) -> AssumptionReport:
    """Lower bounds for the growth and Lipschitz constants by random probing.

    Lipschitz constants are the largest difference quotients seen over pairs
    that differ in a single argument (x, y or z) or in all of them jointly,
    with the joint quotient measured against ``|dx| + |dy| + |dz|``. Pairs
    share a time drawn round-robin from ``n_times`` nodes, so growing
    ``n_probes`` with a fixed seed only ever adds pairs.
    """
    if n_probes < 2:
        raise ValueError("n_probes must be at least 2")
    n, m, r = problem.n, problem.m, float(box_radius)
    times = np.linspace(problem.t0, problem.T, n_times)
    idx = np.arange(n_probes)
    base = {k: _uniform(seed, f"probe/{k}", n_probes, d, r)
            for k, d in (("x", n), ("y", m), ("z", m))}
    alt = {k: _uniform(seed, f"probe/{k}'", n_probes, d, r)
           for k, d in (("x", n), ("y", m), ("z", m))}

    best = {}
    records = {}

    def consider(key, ratios, p1, p2):
        j = int(np.argmax(ratios))
        if ratios[j] > best.get(key, -1.0):
            best[key] = float(ratios[j])
            records[key] = {"ratio": float(ratios[j]),
                            "p1": {k: np.asarray(v[j]).tolist() for k, v in p1.items()},
                            "p2": {k: np.asarray(v[j]).tolist() for k, v in p2.items()}}

    def evaluate(name, t, pts):
        if name == "phi":
            return _checked(problem.eval_phi(pts["x"]), name, t, pts)
        return _checked(problem.eval(name, t, pts["x"], pts["y"], pts["z"]), name, t, pts)

    growth = np.zeros(n_probes)
    for j, t in enumerate(times):
        sel = idx % n_times == j
        if not np.any(sel):
            continue
        p1 = {k: v[sel] for k, v in base.items()}
        p1["t"] = np.full(sel.sum(), t)
        vals = {name: evaluate(name, t, p1) for name in ("b", "sigma", "f", "phi")}
        total = sum(np.linalg.norm(v, axis=-1) for v in vals.values())
        scale = 1.0 + sum(np.linalg.norm(p1[k], axis=-1) for k in ("x", "y", "z"))
        growth[sel] = total / scale

        variants = {}
        for arg in ("x", "y", "z"):
            p2 = dict(p1)
            p2[arg] = alt[arg][sel]
            variants[arg] = p2
        joint = dict(p1)
        joint.update({k: alt[k][sel] for k in ("x", "y", "z")})
        joint_xy = dict(joint)
        joint_xy["z"] = p1["z"]
        variants["joint"] = joint
        variants["joint_xy"] = joint_xy

        def dist(p2, args):
            return sum(np.linalg.norm(p1[a] - p2[a], axis=-1) for a in args)

        for name, plan in (
            ("b", {"x": ("b", "x"), "y": ("b", "y"), "z": ("b", "z"),
                   "joint": ("b", "xyz")}),
            ("sigma", {"x": ("sigma_xy", "x"), "y": ("sigma_xy", "y"),
                       "joint_xy": ("sigma_xy", "xy"), "z": ("sigma_z", "z")}),
            ("f", {"x": ("f", "x"), "y": ("f", "y"), "z": ("f", "z"),
                   "joint": ("f", "xyz")}),
            ("phi", {"x": ("phi", "x")}),
        ):
            for variant, (key, args) in plan.items():
                p2 = variants[variant]
                diff = np.linalg.norm(vals[name] - evaluate(name, t, p2), axis=-1)
                d = dist(p2, args)
                ok = d > 0
                ratios = np.where(ok, diff / np.where(ok, d, 1.0), 0.0)
                consider(key, ratios, p1, p2)

    jg = int(np.argmax(growth))
    records["growth"] = {"ratio": float(growth[jg]),
                         "p1": {k: np.asarray(base[k][jg]).tolist() for k in ("x", "y", "z")}}
    c = problem.coefficients
    probed = {"L_hat": float(growth.max()), "K_b": best.get("b", 0.0),
              "K_sigma_xy": best.get("sigma_xy", 0.0), "L_sigma_z": best.get("sigma_z", 0.0),
              "K_f": best.get("f", 0.0), "K_phi": best.get("phi", 0.0)}
    declared = {"L_hat": c.L, "K_b": c.K, "K_sigma_xy": c.K, "L_sigma_z": c.L_sigma,
                "K_f": c.K, "K_phi": c.K}
    violations = tuple(k for k, v in probed.items()
                       if v > declared[k] * (1 + 1e-9) + 1e-12)
    return AssumptionReport(n_probes=n_probes, box_radius=r, records=records,
                            violations=violations, **probed)


# ----------------------------------------------------------------------------
# affine structure


@dataclass(frozen=True, eq=False)
class LinearTable:
    """Affine coefficients recovered at a set of time nodes.

    ``b[i]`` has shape ``(n, n + 2m)`` acting on the stacked ``(x, y, z)``;
    ``b0[i]`` is the intercept. ``phi`` is ``(m, n)`` and ``phi0`` ``(m,)``.
    """

    times: np.ndarray
    n: int
    m: int
    b: np.ndarray
    b0: np.ndarray
    sigma: np.ndarray
    sigma0: np.ndarray
    f: np.ndarray
    f0: np.ndarray
    phi: np.ndarray
    phi0: np.ndarray

    def block(self, name: str, arg: str) -> np.ndarray:
        n, m = self.n, self.m
        cols = {"x": slice(0, n), "y": slice(n, n + m), "z": slice(n + m, n + 2 * m)}[arg]
        return getattr(self, name)[:, :, cols]

    def is_zero(self, atol=0.0) -> bool:
        return all(np.all(np.abs(getattr(self, k)) <= atol)
                   for k in ("b", "b0", "sigma", "sigma0", "f", "f0", "phi", "phi0"))


def freeze_linear(problem: FBSDEProblem, times=None, tol: float = 1e-10):
    """Recover affine coefficient tables, or ``None`` if any map is not affine.

    Slopes come from unit finite differences at the origin; affinity is then
    confirmed on the lattice ``{-2, -1, 0, 1, 2}^d`` (random lattice points
    when ``d`` is large) to relative tolerance ``tol``.
    """
    n, m = problem.n, problem.m
    d = n + 2 * m
    if times is None:
        times = np.linspace(problem.t0, problem.T, 9)
    times = np.asarray(times, dtype=float)
    if d <= 4:
        lattice = np.array(list(itertools.product((-2.0, -1.0, 0.0, 1.0, 2.0), repeat=d)))
    else:
        rng = np.random.default_rng(12345)
        lattice = rng.integers(-2, 3, size=(400, d)).astype(float)
    eye = np.eye(d)

    def split(p):
        return p[..., :n], p[..., n:n + m], p[..., n + m:]

    def affine_fit(g, pts_dim, unit, lat):
        g0 = g(np.zeros((1, pts_dim)))[0]
        J = (g(unit) - g0).T
        pred = g0 + lat @ J.T
        actual = g(lat)
        if not np.all(np.isfinite(actual)):
            return None
        err = np.abs(actual - pred)
        if np.any(err > tol * (1.0 + np.abs(actual))):
            return None
        return J, g0

    tables = {k: [] for k in ("b", "sigma", "f")}
    for t in times:
        for name in tables:
            fit = affine_fit(lambda p: problem.eval(name, t, *split(p)), d, eye, lattice)
            if fit is None:
                return None
            tables[name].append(fit)
    fit = affine_fit(problem.eval_phi, n, np.eye(n), np.unique(lattice[:, :n], axis=0))
    if fit is None:
        return None
    stack = {k: (np.array([J for J, _ in v]), np.array([c for _, c in v]))
             for k, v in tables.items()}
    return LinearTable(times=times, n=n, m=m,
                       b=stack["b"][0], b0=stack["b"][1],
                       sigma=stack["sigma"][0], sigma0=stack["sigma"][1],
                       f=stack["f"][0], f0=stack["f"][1],
                       phi=fit[0], phi0=fit[1])


# ----------------------------------------------------------------------------
# built-in coefficient families


def as_profile(value, shape=None) -> Callable[[float], np.ndarray]:
    """Turn a constant, a callable of time or a piecewise-constant table
    ``{"times": [...], "values": [...]}`` into a callable of time."""
    if callable(value):
        return lambda t: np.asarray(value(t), dtype=float)
    if isinstance(value, dict):
        knots = np.asarray(value["times"], dtype=float)
        vals = np.asarray(value["values"], dtype=float)
        if len(knots) != len(vals):
            raise ValueError("profile times and values differ in length")

        def table(t):
            i = int(np.clip(np.searchsorted(knots, t, side="right") - 1, 0, len(knots) - 1))
            return vals[i]
        return table
    arr = np.asarray(value, dtype=float)
    if shape is not None:
        arr = np.broadcast_to(arr, shape).copy() if arr.ndim == 0 else arr.reshape(shape)
    arr.flags.writeable = False
    return lambda t: arr


def affine_coefficients(n: int, m: int, *, bx=0.0, by=0.0, bz=0.0, b0=0.0,
                        sx=0.0, sy=0.0, sz=0.0, s0=0.0,
                        fx=0.0, fy=0.0, fz=0.0, f0=0.0,
                        H=0.0, h=0.0, check_times=None,
                        family="affine", params=None) -> CoefficientSet:
    """Affine coefficients ``b = bx x + by y + bz z + b0`` and so on.

    Every block may be a constant, a callable of time or a piecewise-constant
    table; ``Phi(x) = H x + h``. Declared constants are the operator norms of
    the blocks over ``check_times``.
    """
    P = {
        "bx": as_profile(bx, (n, n)), "by": as_profile(by, (n, m)),
        "bz": as_profile(bz, (n, m)), "b0": as_profile(b0, (n,)),
        "sx": as_profile(sx, (n, n)), "sy": as_profile(sy, (n, m)),
        "sz": as_profile(sz, (n, m)), "s0": as_profile(s0, (n,)),
        "fx": as_profile(fx, (m, n)), "fy": as_profile(fy, (m, m)),
        "fz": as_profile(fz, (m, m)), "f0": as_profile(f0, (m,)),
    }
    Hm = np.broadcast_to(np.asarray(H, dtype=float), (m, n)) if np.ndim(H) == 0 \
        else np.asarray(H, dtype=float).reshape(m, n)
    hv = np.broadcast_to(np.asarray(h, dtype=float), (m,))

    def lin(prefix):
        kx, ky, kz, k0 = (P[prefix + s] for s in ("x", "y", "z", "0"))

        def g(t, x, y, z):
            return (np.asarray(x) @ kx(t).T + np.asarray(y) @ ky(t).T
                    + np.asarray(z) @ kz(t).T + k0(t))
        return g

    def phi(x):
        return np.asarray(x) @ Hm.T + hv

    if check_times is None:
        check_times = np.linspace(0.0, 1.0, 17)
    norm = lambda a: float(np.linalg.norm(np.atleast_2d(a), 2))
    K = L = Ls = 0.0
    for t in check_times:
        blocks = {k: v(t) for k, v in P.items()}
        K = max(K, *(norm(blocks[k]) for k in
                     ("bx", "by", "bz", "sx", "sy", "fx", "fy", "fz")), norm(Hm))
        Ls = max(Ls, norm(blocks["sz"]))
        Lt = 0.0
        for pre in ("b", "s", "f"):
            Lt += max(norm(blocks[pre + "x"]), norm(blocks[pre + "y"]),
                      norm(blocks[pre + "z"]), float(np.linalg.norm(blocks[pre + "0"])))
        Lt += max(norm(Hm), float(np.linalg.norm(hv)))
        L = max(L, Lt)
    return CoefficientSet(lin("b"), lin("s"), lin("f"), phi, L=L, K=K, L_sigma=Ls,
                          family=family, params=dict(params or {}))


def affine_problem(n: int, m: int, t0: float, T: float, xi, **blocks) -> FBSDEProblem:
    blocks.setdefault("check_times", np.linspace(t0, T, 17))
    return FBSDEProblem(affine_coefficients(n, m, **blocks), n, m, t0, T, xi)


def zero_problem(t0=0.0, T=1.0, xi=0.0, n=1, m=1) -> FBSDEProblem:
    return affine_problem(n, m, t0, T, np.broadcast_to(np.asarray(xi, dtype=float), (n,)))


def polynomial_coefficients(terms: dict, L=0.0, K=0.0, L_sigma=0.0) -> CoefficientSet:
    """Scalar (n = m = 1) coefficients built from monomials.

    ``terms`` maps each of ``b``, ``sigma``, ``f`` to a list of
    ``[coef, px, py, pz]`` (meaning ``coef * x**px * y**py * z**pz``) and
    ``phi`` to a list of ``[coef, px]``. Missing maps are zero.
    """
    known = {"b", "sigma", "f", "phi"}
    extra = set(terms) - known
    if extra:
        raise ValueError(f"unknown polynomial map {sorted(extra)[0]!r}")

    def poly(rows):
        rows = [tuple(r) for r in rows]
        for r in rows:
            if len(r) != 4:
                raise ValueError("polynomial terms are [coef, px, py, pz]")

        def g(t, x, y, z):
            out = 0.0 * (x + y + z)
            for c, px, py, pz in rows:
                out = out + c * x ** px * y ** py * z ** pz
            return out
        return g

    phi_rows = [tuple(r) for r in terms.get("phi", [])]
    for r in phi_rows:
        if len(r) != 2:
            raise ValueError("phi terms are [coef, px]")

    def phi(x):
        out = 0.0 * x
        for c, px in phi_rows:
            out = out + c * x ** px
        return out

    return CoefficientSet(poly(terms.get("b", [])), poly(terms.get("sigma", [])),
                          poly(terms.get("f", [])), phi, L=L, K=K, L_sigma=L_sigma,
                          family="polynomial", params={"terms": terms})
