"""Linear-quadratic control through its Hamiltonian FBSDE.

State ``dX = (A X + B u + b) ds + (C X + D u + sigma) dB`` and cost

    J = E[ int <Q X, X> + 2 <S X, u> + <R u, u> + 2 <q, X> + 2 <rho, u> ds
           + <H X_T, X_T> + 2 <h, X_T> ].

Stationarity gives ``u = -R^{-1}(B'Y + D'Z + S X + rho)``; substituting it in
the state and adjoint equations yields an affine fully coupled FBSDE in
``(X, Y, Z)`` with ``n = m``. The driver pairs ``Y`` with
``(A - B R^{-1} S)'`` and ``Z`` with ``(C - D R^{-1} S)'``, which is what
makes ``<F(s, x, y, z), (x, y, z)>`` collapse to the negative quadratic form
checked by :func:`monotonicity_certificate`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .errors import (CertificateFailureError, MismatchedNoiseError, RestrictionError,
                     SingularRError, SpecViolationError)
from .lp import _mean_hw
from .model import FBSDEProblem, affine_coefficients, as_profile
from .solver import SolutionEnsemble
from .stochastic import BrownianEnsemble, PathEnsemble, TimeGrid, build_grid, substream_seed

_MATRICES = ("A", "B", "C", "D", "Q", "S", "R")
_VECTORS = ("b", "sigma", "q", "rho")


def _profile(value, shape):
    """Profile of fixed shape; a scalar for a square block means a multiple of I."""
    square = len(shape) == 2 and shape[0] == shape[1]
    if square and not callable(value) and not isinstance(value, dict) and np.ndim(value) == 0:
        value = float(value) * np.eye(shape[0])
    g = as_profile(value, shape)

    def f(t):
        a = np.asarray(g(t), dtype=float)
        if a.ndim == 0:
            a = a * np.eye(shape[0]) if square else np.full(shape, float(a))
        return np.broadcast_to(a, shape).copy() if a.size == 1 else a.reshape(shape)
    return f


@dataclass(frozen=True, eq=False)
class LQSpec:
    """LQ data. Time-dependent entries may be constants, callables of time
    or piecewise-constant tables ``{"times": [...], "values": [...]}``."""

    n: int
    m_u: int
    A: Any = 0.0
    B: Any = 0.0
    C: Any = 0.0
    D: Any = 0.0
    Q: Any = 0.0
    S: Any = 0.0
    R: Any = 1.0
    H: Any = 0.0
    b: Any = 0.0
    sigma: Any = 0.0
    q: Any = 0.0
    rho: Any = 0.0
    h: Any = 0.0
    t0: float = 0.0
    T: float = 1.0
    delta_R: float = 1e-8
    validate: bool = True
    _fns: dict = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        n, k = self.n, self.m_u
        shapes = {"A": (n, n), "B": (n, k), "C": (n, n), "D": (n, k), "Q": (n, n),
                  "S": (k, n), "R": (k, k), "b": (n,), "sigma": (n,), "q": (n,), "rho": (k,)}
        for name, shape in shapes.items():
            self._fns[name] = _profile(getattr(self, name), shape)
        if not self.T > self.t0:
            raise SpecViolationError("T must exceed t0")
        if not self.delta_R > 0:
            raise SpecViolationError("delta_R must be positive")
        object.__setattr__(self, "H", _profile(self.H, (n, n))(self.T))
        object.__setattr__(self, "h", _profile(self.h, (n,))(self.T))
        if self.validate:
            self.check()

    def at(self, t: float) -> dict:
        out = {k: f(t) for k, f in self._fns.items()}
        out["H"], out["h"] = self.H, self.h
        return out

    def check_times(self) -> np.ndarray:
        ts = list(np.linspace(self.t0, self.T, 17))
        for name in _MATRICES + _VECTORS:
            v = getattr(self, name)
            if isinstance(v, dict):
                ts.extend(t for t in v["times"] if self.t0 <= t <= self.T)
        return np.unique(np.asarray(ts, dtype=float))

    def check(self):
        """Raise ``SpecViolationError`` unless the convexity conditions hold."""
        if np.min(np.linalg.eigvalsh(0.5 * (self.H + self.H.T))) < -1e-10:
            raise SpecViolationError("H is not positive semidefinite")
        if not np.allclose(self.H, self.H.T, atol=1e-12):
            raise SpecViolationError("H is not symmetric")
        for t in self.check_times():
            M = self.at(t)
            R = M["R"]
            if not np.allclose(R, R.T, atol=1e-12) or not np.allclose(M["Q"], M["Q"].T, atol=1e-12):
                raise SpecViolationError(f"Q or R is not symmetric at t={t}")
            if np.min(np.linalg.eigvalsh(R)) < self.delta_R:
                raise SpecViolationError(f"R is not above delta_R * I at t={t}")
            Qs = M["Q"] - M["S"].T @ np.linalg.solve(R, M["S"])
            if np.min(np.linalg.eigvalsh(0.5 * (Qs + Qs.T))) < -1e-10:
                raise SpecViolationError(f"Q - S'R^-1 S is not positive semidefinite at t={t}")

    def assumption_records(self) -> dict:
        ts = self.check_times()
        sup = {k: max(float(np.linalg.norm(np.atleast_2d(self.at(t)[k]), 2)) for t in ts)
               for k in ("A", "B", "C", "D")}
        dnorm = [float(np.sqrt(np.trace(self.at(t)["D"] @ self.at(t)["D"].T))) for t in ts]
        return {"sup_norms": sup, "D_frobenius": dict(zip(map(float, ts), dnorm)),
                "D_frobenius_max": max(dnorm)}


def hamiltonian_blocks(spec: LQSpec, t: float) -> dict:
    M = spec.at(t)
    R = M["R"]
    try:
        if abs(np.linalg.det(R)) < 1e-300:
            raise np.linalg.LinAlgError
        Ri = np.linalg.inv(R)
    except np.linalg.LinAlgError:
        raise SingularRError(t) from None
    A, B, C, D, Q, S = (M[k] for k in ("A", "B", "C", "D", "Q", "S"))
    bx = A - B @ Ri @ S
    sx = C - D @ Ri @ S
    return {
        "bx": bx, "by": -B @ Ri @ B.T, "bz": -B @ Ri @ D.T, "b0": -B @ Ri @ M["rho"] + M["b"],
        "sx": sx, "sy": -D @ Ri @ B.T, "sz": -D @ Ri @ D.T, "s0": -D @ Ri @ M["rho"] + M["sigma"],
        "fx": Q - S.T @ Ri @ S, "fy": bx.T, "fz": sx.T, "f0": -S.T @ Ri @ M["rho"] + M["q"],
        "Ri": Ri,
    }


def build_hamiltonian_fbsde(spec: LQSpec, xi=None) -> FBSDEProblem:
    """Affine FBSDE obtained by closing the state and adjoint equations."""
    ts = spec.check_times()
    for t in ts:
        hamiltonian_blocks(spec, t)
    cache: dict = {}

    def blk(name):
        def g(t):
            key = float(t)
            if key not in cache:
                if len(cache) > 4096:
                    cache.clear()
                cache[key] = hamiltonian_blocks(spec, key)
            return cache[key][name]
        return g

    names = ("bx", "by", "bz", "b0", "sx", "sy", "sz", "s0", "fx", "fy", "fz", "f0")
    coef = affine_coefficients(spec.n, spec.n, H=spec.H, h=spec.h, check_times=ts,
                               family="lq-hamiltonian", **{k: blk(k) for k in names})
    xi = np.zeros(spec.n) if xi is None else xi
    return FBSDEProblem(coef, spec.n, spec.n, spec.t0, spec.T, xi)


@dataclass(frozen=True)
class MonotonicityCertificate:
    c1: float
    c2: float
    n_samples: int
    worst_residual: float
    identity_residual: float

    @property
    def valid(self) -> bool:
        return self.worst_residual <= 1e-8 and self.identity_residual <= 1e-8

    def as_dict(self) -> dict:
        return {"c1": self.c1, "c2": self.c2, "n_samples": self.n_samples,
                "worst_residual": self.worst_residual,
                "identity_residual": self.identity_residual, "valid": self.valid}


def _F(problem: FBSDEProblem, t, x, y, z, x2=None, y2=None, z2=None):
    """Homogeneous part of (-f, b, sigma), or its difference between two states."""
    if x2 is None:
        x2, y2, z2 = np.zeros_like(x), np.zeros_like(y), np.zeros_like(z)
    d = lambda name: problem.eval(name, t, x, y, z) - problem.eval(name, t, x2, y2, z2)
    return -d("f"), d("b"), d("sigma")


def monotonicity_certificate(spec: LQSpec, n_samples: int, seed: int,
                             problem: FBSDEProblem | None = None,
                             tol: float = 1e-8) -> MonotonicityCertificate:
    """Monotonicity constants and an exact check of the pairing identity.

    ``c1`` is the smallest eigenvalue of ``Q - S'R^-1 S`` over the time nodes
    (clamped at 0) and ``c2`` the smallest eigenvalue of ``R^-1``. The
    identity ``<F, U> = -<(Q - S'R^-1 S) x, x> - <R^-1 w, w>``,
    ``w = B'y + D'z``, is checked on random samples through the coefficient
    maps of the built FBSDE.
    """
    problem = problem or build_hamiltonian_fbsde(spec)
    ts = spec.check_times()
    c1, c2 = math.inf, math.inf
    for t in ts:
        blk = hamiltonian_blocks(spec, t)
        c1 = min(c1, float(np.min(np.linalg.eigvalsh(0.5 * (blk["fx"] + blk["fx"].T)))))
        c2 = min(c2, float(np.min(np.linalg.eigvalsh(0.5 * (blk["Ri"] + blk["Ri"].T)))))
    c1 = max(c1, 0.0)
    rng = np.random.default_rng(substream_seed(seed, "certificate"))
    n = spec.n
    t_idx = rng.integers(0, len(ts), n_samples)
    xyz = rng.standard_normal((n_samples, 3 * n))
    worst, ident = -math.inf, 0.0
    for j, t in enumerate(ts):
        sel = t_idx == j
        if not np.any(sel):
            continue
        x, y, z = xyz[sel, :n], xyz[sel, n:2 * n], xyz[sel, 2 * n:]
        Fx, Fy, Fz = _F(problem, t, x, y, z)
        pairing = np.sum(Fx * x + Fy * y + Fz * z, axis=1)
        M = spec.at(t)
        blk = hamiltonian_blocks(spec, t)
        w = y @ M["B"] + z @ M["D"]
        qx = np.einsum("pi,ij,pj->p", x, blk["fx"], x)
        qw = np.einsum("pi,ij,pj->p", w, blk["Ri"], w)
        ineq = pairing + c1 * np.sum(x * x, axis=1) + c2 * np.sum(w * w, axis=1)
        worst = max(worst, float(ineq.max()))
        ident = max(ident, float(np.max(np.abs(pairing + qx + qw))))
    cert = MonotonicityCertificate(c1, c2, n_samples, worst, ident)
    if cert.worst_residual > tol or cert.identity_residual > tol:
        raise CertificateFailureError(
            f"monotonicity residuals {cert.worst_residual:.3g} / {cert.identity_residual:.3g} "
            f"exceed {tol:g}")
    return cert


def optimal_control_from_solution(spec: LQSpec, solution: SolutionEnsemble) -> PathEnsemble:
    """Nodewise ``u = -R^{-1}(B'Y + D'Z + S X + rho)``."""
    grid = solution.grid
    X, Y, Z = solution.X.values, solution.Y.values, solution.Z.values
    if X.shape[2] != spec.n or Y.shape[2] != spec.n:
        raise ValueError("solution dimensions do not match the LQ data")
    U = np.empty(X.shape[:2] + (spec.m_u,))
    for k, t in enumerate(grid.points):
        M = spec.at(float(t))
        rhs = Y[:, k] @ M["B"] + Z[:, k] @ M["D"] + X[:, k] @ M["S"].T + M["rho"]
        U[:, k] = -np.linalg.solve(M["R"], rhs.T).T
    return PathEnsemble(grid, U, {"kind": "control"})


def stationarity_residual(spec: LQSpec, solution: SolutionEnsemble, control: PathEnsemble) -> float:
    X, Y, Z, U = (solution.X.values, solution.Y.values, solution.Z.values, control.values)
    worst = 0.0
    for k, t in enumerate(solution.grid.points):
        M = spec.at(float(t))
        r = Y[:, k] @ M["B"] + Z[:, k] @ M["D"] + X[:, k] @ M["S"].T + U[:, k] @ M["R"].T + M["rho"]
        worst = max(worst, float(np.max(np.abs(r))))
    return worst


@dataclass(frozen=True)
class CostEstimate:
    mean: float
    half_width: float
    per_path: np.ndarray = field(repr=False)
    X: np.ndarray = field(repr=False, default=None)


def simulate_cost(spec: LQSpec, control: PathEnsemble, noise: BrownianEnsemble, x0) -> CostEstimate:
    """Euler simulation of the controlled state under an open-loop control table."""
    grid = noise.grid
    if control.grid != grid:
        raise ValueError("control and noise must share the grid")
    U = control.values
    if U.shape[0] not in (1, noise.n_paths) or U.shape[2] != spec.m_u:
        raise ValueError(f"control has shape {U.shape}, expected (n_paths, n_steps + 1, {spec.m_u})")
    x0 = np.broadcast_to(np.asarray(x0, dtype=float), (spec.n,))
    P = noise.n_paths
    X = np.empty((P, grid.n_steps + 1, spec.n))
    X[:, 0] = x0
    cost = np.zeros(P)
    for k in range(grid.n_steps):
        M = spec.at(float(grid.points[k]))
        x = X[:, k]
        u = np.broadcast_to(U[:, k], (P, spec.m_u))
        run = (np.einsum("pi,ij,pj->p", x, M["Q"], x) + 2 * np.einsum("pi,ij,pj->p", u, M["S"], x)
               + np.einsum("pi,ij,pj->p", u, M["R"], u) + 2 * x @ M["q"] + 2 * u @ M["rho"])
        cost += run * grid.dt[k]
        X[:, k + 1] = (x + (x @ M["A"].T + u @ M["B"].T + M["b"]) * grid.dt[k]
                       + (x @ M["C"].T + u @ M["D"].T + M["sigma"]) * noise.increments[:, k, None])
    xT = X[:, -1]
    cost += np.einsum("pi,ij,pj->p", xT, spec.H, xT) + 2 * xT @ spec.h
    mean, hw = _mean_hw(cost)
    return CostEstimate(float(mean), float(hw), cost, X)


def feedback_control(gain_fn, noise: BrownianEnsemble, spec: LQSpec, x0) -> PathEnsemble:
    """Materialise a linear feedback ``u = G(t) x`` into an open-loop table."""
    grid = noise.grid
    P = noise.n_paths
    X = np.empty((P, grid.n_steps + 1, spec.n))
    U = np.empty((P, grid.n_steps + 1, spec.m_u))
    X[:, 0] = np.broadcast_to(np.asarray(x0, dtype=float), (spec.n,))
    for k in range(grid.n_steps + 1):
        M = spec.at(float(grid.points[k]))
        U[:, k] = X[:, k] @ np.asarray(gain_fn(float(grid.points[k]))).T
        if k < grid.n_steps:
            x, u = X[:, k], U[:, k]
            X[:, k + 1] = (x + (x @ M["A"].T + u @ M["B"].T + M["b"]) * grid.dt[k]
                           + (x @ M["C"].T + u @ M["D"].T + M["sigma"]) * noise.increments[:, k, None])
    return PathEnsemble(grid, U, {"kind": "feedback"})


@dataclass(frozen=True)
class OptimalityReport:
    epsilon: float
    J_base: float
    J_base_hw: float
    J_plus: np.ndarray
    J_minus: np.ndarray
    margins: np.ndarray
    tolerances: np.ndarray
    second_differences: np.ndarray

    @property
    def all_margins_ok(self) -> bool:
        return bool(np.all(self.margins >= -self.tolerances))

    @property
    def mean_margin(self) -> float:
        return float(np.mean(self.margins))

    @property
    def all_convex(self) -> bool:
        return bool(np.all(self.second_differences > 0))

    def rows(self) -> list[dict]:
        return [{"perturbation": i, "epsilon": self.epsilon, "J_base": self.J_base,
                 "J_plus": float(jp), "J_minus": float(jm), "margin": float(mg),
                 "tolerance": float(tl), "second_difference": float(sd)}
                for i, (jp, jm, mg, tl, sd) in enumerate(zip(
                    self.J_plus, self.J_minus, self.margins, self.tolerances,
                    self.second_differences))]


def random_perturbations(grid: TimeGrid, m_u: int, count: int, seed: int, n_pieces: int = 8):
    """Deterministic-in-time piecewise-constant directions with entries in [-1, 1]."""
    rng = np.random.default_rng(substream_seed(seed, "perturbations"))
    levels = rng.uniform(-1.0, 1.0, size=(count, n_pieces, m_u))
    piece = np.minimum((np.arange(grid.n_steps + 1) * n_pieces) // max(grid.n_steps, 1),
                       n_pieces - 1)
    return levels[:, piece, :]


def optimality_test(spec: LQSpec, control: PathEnsemble, noise: BrownianEnsemble, x0,
                    n_perturbations: int, epsilon: float, seed: int,
                    n_pieces: int = 8) -> OptimalityReport:
    """Cost margins ``J(u + eps v) - J(u)`` for random bounded directions ``v``."""
    base = simulate_cost(spec, control, noise, x0)
    dirs = random_perturbations(control.grid, spec.m_u, n_perturbations, seed, n_pieces)
    plus, minus, tols, sds = [], [], [], []
    for v in dirs:
        up = simulate_cost(spec, PathEnsemble(control.grid, control.values + epsilon * v), noise, x0)
        dn = simulate_cost(spec, PathEnsemble(control.grid, control.values - epsilon * v), noise, x0)
        plus.append(up.mean)
        minus.append(dn.mean)
        tols.append(base.half_width + up.half_width)
        sds.append((up.mean + dn.mean - 2 * base.mean) / epsilon ** 2 if epsilon > 0 else math.nan)
    plus = np.array(plus)
    return OptimalityReport(float(epsilon), base.mean, base.half_width, plus, np.array(minus),
                            plus - base.mean, np.array(tols), np.array(sds))


@dataclass(frozen=True)
class PairingResidual:
    residual: float
    half_width: float
    terminal: float
    integral: float
    initial: float


def ito_pairing_residual(spec: LQSpec, sol: SolutionEnsemble, sol_prime: SolutionEnsemble,
                         problem: FBSDEProblem | None = None) -> PairingResidual:
    """Discrete check of ``E<dX_T, H dX_T> = E int <dF, dU> ds + E<dY_0, xi - xi'>``."""
    if not sol.noise.same_noise(sol_prime.noise):
        raise MismatchedNoiseError("pairing identity needs common noise")
    problem = problem or build_hamiltonian_fbsde(spec)
    X, Y, Z = sol.X.values, sol.Y.values, sol.Z.values
    Xp, Yp, Zp = sol_prime.X.values, sol_prime.Y.values, sol_prime.Z.values
    dxi = X[:, 0] - Xp[:, 0]
    if np.all(dxi == 0):
        raise ValueError("xi and xi_prime must differ")
    grid = sol.grid
    dX, dY, dZ = X - Xp, Y - Yp, Z - Zp
    integral = np.zeros(sol.n_paths)
    for k in range(grid.n_steps):
        t = float(grid.points[k])
        Fx, Fy, Fz = _F(problem, t, X[:, k], Y[:, k], Z[:, k], Xp[:, k], Yp[:, k], Zp[:, k])
        integral += np.sum(Fx * dX[:, k] + Fy * dY[:, k] + Fz * dZ[:, k], axis=1) * grid.dt[k]
    terminal = np.einsum("pi,ij,pj->p", dX[:, -1], spec.H, dX[:, -1])
    initial = np.sum(dY[:, 0] * dxi, axis=1)
    samples = terminal - integral - initial
    mean, hw = _mean_hw(samples)
    return PairingResidual(abs(float(mean)), float(hw), float(terminal.mean()),
                           float(integral.mean()), float(initial.mean()))


@dataclass(frozen=True)
class RiccatiSolution:
    grid: TimeGrid
    P: np.ndarray
    gain: np.ndarray

    def value(self, x0, i: int = 0) -> float:
        x0 = np.atleast_1d(np.asarray(x0, dtype=float))
        return float(x0 @ self.P[i] @ x0)

    def gain_at(self, t: float) -> np.ndarray:
        i = int(np.clip(np.searchsorted(self.grid.points, t + 1e-12, side="right") - 1,
                        0, self.grid.n_steps))
        return self.gain[i]


def riccati_oracle(spec: LQSpec, grid: TimeGrid | None = None, substeps: int = 16) -> RiccatiSolution:
    """Backward RK4 for ``-P' = A'P + PA - P B R^-1 B'P + Q``, ``P(T) = H``.

    Only for specs with ``C = D = 0``, ``S = 0`` and no affine terms.
    """
    grid = grid or build_grid(spec.t0, spec.T, 256)
    for t in spec.check_times():
        M = spec.at(t)
        for name in ("C", "D", "S", "b", "sigma", "q", "rho"):
            if np.any(M[name] != 0):
                raise RestrictionError(f"riccati_oracle needs {name} = 0 (t={t})")
    if np.any(spec.h != 0):
        raise RestrictionError("riccati_oracle needs h = 0")

    def rhs(t, P):
        M = spec.at(t)
        A, B, R = M["A"], M["B"], M["R"]
        return -(A.T @ P + P @ A - P @ B @ np.linalg.solve(R, B.T @ P) + M["Q"])

    N = grid.n_steps
    P = np.empty((N + 1, spec.n, spec.n))
    P[N] = spec.H
    for k in range(N - 1, -1, -1):
        p = P[k + 1].copy()
        t = float(grid.points[k + 1])
        h = -(grid.points[k + 1] - grid.points[k]) / substeps
        for _ in range(substeps):
            k1 = rhs(t, p)
            k2 = rhs(t + h / 2, p + h / 2 * k1)
            k3 = rhs(t + h / 2, p + h / 2 * k2)
            k4 = rhs(t + h, p + h * k3)
            p = p + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            t += h
        P[k] = 0.5 * (p + p.T)
    gain = np.array([-np.linalg.solve(spec.at(float(t))["R"], spec.at(float(t))["B"].T @ P[i])
                     for i, t in enumerate(grid.points)])
    return RiccatiSolution(grid, P, gain)
