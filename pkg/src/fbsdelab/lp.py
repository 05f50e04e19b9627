"""Monte Carlo checks of the L^2 / L^p estimates and the BDG smallness gates."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, MismatchedNoiseError
from .model import FBSDEProblem
from .solver import DecouplingField, SolutionEnsemble, field_lipschitz_profile, solve_global
from .stochastic import BrownianEnsemble

Z95 = 1.959963984540054
COMPONENTS = ("sup_X", "sup_Y", "int_Z")


def _functionals(X, Y, Z, dt, p):
    sx = np.max(np.linalg.norm(X, axis=-1), axis=1) ** p
    sy = np.max(np.linalg.norm(Y, axis=-1), axis=1) ** p
    qz = np.sum(np.sum(Z[:, :-1] ** 2, axis=-1) * dt, axis=1)
    return np.stack([sx, sy, qz ** (p / 2)], axis=1)


def path_functionals(solution: SolutionEnsemble, p: float) -> np.ndarray:
    """Per-path ``(sup|X|^p, sup|Y|^p, (sum |Z_k|^2 dt_k)^(p/2))``.

    Suprema are taken over grid nodes; the Z integral is a left-endpoint sum.
    """
    if p < 1:
        raise DomainError("p must be at least 1")
    return _functionals(solution.X.values, solution.Y.values, solution.Z.values,
                        solution.grid.dt, p)


def _mean_hw(samples):
    samples = np.asarray(samples, dtype=float)
    n = samples.shape[0]
    mean = samples.mean(axis=0)
    sd = samples.std(axis=0, ddof=1) if n > 1 else np.zeros_like(mean)
    return mean, Z95 * sd / math.sqrt(n)


@dataclass(frozen=True)
class LpReport:
    p: float
    xi: tuple
    estimates: tuple
    half_widths: tuple
    C_hat: float
    C_hat_half_width: float
    n_paths: int
    seed: int
    n_steps: int

    def row(self) -> dict:
        out = {"p": self.p, "xi": self.xi[0] if len(self.xi) == 1 else list(self.xi)}
        for name, e, h in zip(COMPONENTS, self.estimates, self.half_widths):
            out[name] = e
            out[name + "_hw"] = h
        out.update(C_hat=self.C_hat, C_hat_hw=self.C_hat_half_width, n_paths=self.n_paths,
                   seed=self.seed, n_steps=self.n_steps)
        return out


def lp_report(solution: SolutionEnsemble, p: float) -> LpReport:
    xi = solution.X.values[0, 0]
    F = path_functionals(solution, p)
    est, hw = _mean_hw(F)
    tot_mean, tot_hw = _mean_hw(F.sum(axis=1))
    denom = 1.0 + float(np.linalg.norm(xi)) ** p
    return LpReport(p=float(p), xi=tuple(float(v) for v in xi),
                    estimates=tuple(map(float, est)), half_widths=tuple(map(float, hw)),
                    C_hat=float(tot_mean) / denom, C_hat_half_width=float(tot_hw) / denom,
                    n_paths=solution.n_paths, seed=solution.seed,
                    n_steps=solution.grid.n_steps)


def estimate_lp_bound(problem: FBSDEProblem, field: DecouplingField, noise: BrownianEnsemble,
                      xis, p: float) -> list[LpReport]:
    """One report per entry of the initial-value ladder, all on the same noise."""
    xis = list(xis)
    if not xis:
        raise ValueError("the xi ladder is empty")
    return [lp_report(solve_global(problem, field, noise, xi=np.atleast_1d(xi)), p)
            for xi in xis]


@dataclass(frozen=True)
class StabilityReport:
    p: float
    xi: tuple
    xi_prime: tuple
    estimates: tuple
    half_widths: tuple
    C_stab: float
    C_stab_half_width: float
    violation_rate: float
    kappa: float
    n_paths: int
    seed: int
    n_steps: int

    def row(self) -> dict:
        one = lambda v: v[0] if len(v) == 1 else list(v)
        out = {"p": self.p, "xi": one(self.xi), "xi_prime": one(self.xi_prime)}
        for name, e, h in zip(COMPONENTS, self.estimates, self.half_widths):
            out["d_" + name] = e
            out["d_" + name + "_hw"] = h
        out.update(C_stab=self.C_stab, C_stab_hw=self.C_stab_half_width,
                   violation_rate=self.violation_rate, kappa=self.kappa,
                   n_paths=self.n_paths, seed=self.seed, n_steps=self.n_steps)
        return out


def stability_from_solutions(sol: SolutionEnsemble, sol_prime: SolutionEnsemble, p: float,
                             kappa: float) -> StabilityReport:
    """Difference functionals of two solutions driven by the same noise.

    A (path, node) pair violates the pointwise bound when
    ``|Y - Y'| > kappa |X - X'|``.
    """
    if not sol.noise.same_noise(sol_prime.noise):
        raise MismatchedNoiseError("stability needs both solutions on common noise")
    xi = sol.X.values[0, 0]
    xip = sol_prime.X.values[0, 0]
    gap = float(np.linalg.norm(xi - xip))
    if gap == 0:
        raise ValueError("xi and xi_prime must differ")
    dX = sol.X.values - sol_prime.X.values
    dY = sol.Y.values - sol_prime.Y.values
    dZ = sol.Z.values - sol_prime.Z.values
    F = _functionals(dX, dY, dZ, sol.grid.dt, p)
    est, hw = _mean_hw(F)
    tot, tot_hw = _mean_hw(F.sum(axis=1))
    nx = np.linalg.norm(dX, axis=-1)
    ny = np.linalg.norm(dY, axis=-1)
    slack = 1e-12 * (1.0 + np.abs(sol.Y.values).max())
    rate = float(np.mean(ny > kappa * nx + slack))
    return StabilityReport(p=float(p), xi=tuple(map(float, xi)), xi_prime=tuple(map(float, xip)),
                           estimates=tuple(map(float, est)), half_widths=tuple(map(float, hw)),
                           C_stab=float(tot) / gap ** p, C_stab_half_width=float(tot_hw) / gap ** p,
                           violation_rate=rate, kappa=float(kappa), n_paths=sol.n_paths,
                           seed=sol.seed, n_steps=sol.grid.n_steps)


def slope_bound(field: DecouplingField, tolerance: float = 0.05) -> float:
    return float(np.max(field_lipschitz_profile(field))) * (1.0 + tolerance)


def estimate_stability(problem: FBSDEProblem, field: DecouplingField, noise: BrownianEnsemble,
                       p: float, xi, xi_prime, tolerance: float = 0.05) -> StabilityReport:
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    xi_prime = np.atleast_1d(np.asarray(xi_prime, dtype=float))
    if np.array_equal(xi, xi_prime):
        raise ValueError("xi and xi_prime must differ")
    sol = solve_global(problem, field, noise, xi=xi)
    sol_prime = solve_global(problem, field, noise, xi=xi_prime)
    return stability_from_solutions(sol, sol_prime, p, slope_bound(field, tolerance))


def subinterval_constants(solution: SolutionEnsemble, blocks, p: float) -> list[dict]:
    """Implied local constant on each stitching block.

    For the block starting at ``tau`` this is
    ``E[block functionals] / E[1 + |X_tau|^p]``; ``nonuniform`` in the last
    entry flags a max/min spread above 2.
    """
    pts = solution.grid.points
    X, Y, Z = solution.X.values, solution.Y.values, solution.Z.values
    out = []
    for a, b in blocks:
        i0, i1 = solution.grid.index_of([a, b])
        F = _functionals(X[:, i0:i1 + 1], Y[:, i0:i1 + 1], Z[:, i0:i1 + 1],
                         np.diff(pts[i0:i1 + 1]), p).sum(axis=1)
        denom = np.mean(1.0 + np.linalg.norm(X[:, i0], axis=-1) ** p)
        out.append({"start": float(a), "end": float(b), "C_hat": float(F.mean() / denom)})
    vals = [r["C_hat"] for r in out]
    lo = min(vals)
    spread = max(vals) / lo if lo > 0 else (1.0 if max(vals) == 0 else math.inf)
    for r in out:
        r["nonuniform"] = bool(spread > 2.0)
    return out


def audit_constant_growth(C1: float, p: float, k: int) -> float:
    """Constant after stitching ``k`` blocks with the local constant ``C1``.

    Each stitch maps the running constant ``C`` to ``2^(p/2) (2C + C^2)``;
    ``k = 1`` returns ``C1`` unchanged. Overflow saturates to ``inf``.
    """
    if not C1 > 0:
        raise ValueError("C1 must be positive")
    if int(k) < 1:
        raise ValueError("k must be at least 1")
    c = float(C1)
    inflate = 2.0 ** (p / 2.0)
    for _ in range(int(k) - 1):
        try:
            c = inflate * (2.0 * c + c * c)
        except OverflowError:
            return math.inf
        if not math.isfinite(c):
            return math.inf
    return c


@dataclass(frozen=True)
class KpInputs:
    p: float
    K_upper: float
    K_lower: float

    def __post_init__(self):
        if not self.p > 1:
            raise DomainError(f"K_p needs p > 1, got p={self.p}")
        if not (self.K_upper > 0 and self.K_lower > 0):
            raise DomainError("BDG constants must be positive")
        if self.K_lower > self.K_upper:
            raise DomainError("lower BDG constant exceeds the upper one")

    @classmethod
    def defaults(cls, p: float) -> KpInputs:
        return cls(p, 4.0 * p, 1.0)


def compute_kp(inputs: KpInputs) -> float:
    p, ku, kl = inputs.p, inputs.K_upper, inputs.K_lower
    if not p > 1:
        raise DomainError("K_p needs p > 1")
    return ku ** (1.0 / p) * (p / (p + 1.0) + 2.0 * kl ** (-1.0 / p) * (2.0 * p - 1.0) / (p - 1.0))


def smallness_gates(K_p: float, L_sigma: float, K: float, sqrtC1: float | None = None) -> dict:
    if min(K_p, L_sigma, K) < 0 or (sqrtC1 is not None and sqrtC1 < 0):
        raise ValueError("gate inputs must be non-negative")
    prod = K_p * L_sigma * K
    out = {"h51_product": prod, "h51": bool(prod < 1.0)}
    if sqrtC1 is None:
        out["theorem51_product"] = None
        out["theorem51"] = None
    else:
        prod2 = K_p * L_sigma * sqrtC1
        out["theorem51_product"] = prod2
        out["theorem51"] = bool(prod2 < 1.0)
    return out
