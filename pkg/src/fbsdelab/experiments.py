"""Experiment orchestration: config in, report and tables out."""

from __future__ import annotations

import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig
from .errors import ConfigError, RestrictionError
from .export import write_report, write_table
from .lp import (KpInputs, audit_constant_growth, compute_kp, estimate_lp_bound,
                 field_lipschitz_profile, slope_bound, smallness_gates, stability_from_solutions,
                 subinterval_constants)
from .lq import (LQSpec, build_hamiltonian_fbsde, ito_pairing_residual, monotonicity_certificate,
                 optimal_control_from_solution, optimality_test, riccati_oracle, simulate_cost,
                 stationarity_residual)
from .model import FBSDEProblem, affine_problem, polynomial_coefficients
from .oracles import (Example1Params, backward_residual, convergence_study, example1_closed_form,
                      example1_problem, gaussian_linear_oracle, gaussian_linear_problem, rms_errors)
from .solver import SolverParams, SpatialGrid, build_decoupling_field, solve_global
from .stochastic import build_grid, sample_brownian, substream_seed

logger = logging.getLogger(__name__)

OUT_ENV = "FBSDELAB_OUT"
DEFAULT_OUT = "fbsdelab-out"


@dataclass
class RunReport:
    config: ExperimentConfig
    outputs: dict
    tables: dict
    warnings: list = field(default_factory=list)
    wall_clock: float = 0.0
    files: dict = field(default_factory=dict)
    version: str = __version__

    def as_dict(self) -> dict:
        return {"config": self.config.to_dict(), "version": self.version,
                "wall_clock_seconds": self.wall_clock, "outputs": self.outputs,
                "warnings": self.warnings,
                "tables": {name: {"file": f"{name}.csv", "rows": len(rows)}
                           for name, rows in self.tables.items()}}


def output_dir(config: ExperimentConfig) -> Path:
    return Path(config.output.get("dir") or os.environ.get(OUT_ENV) or DEFAULT_OUT)


def solver_params(config: ExperimentConfig) -> SolverParams:
    s = config.solver
    grid = SpatialGrid(s["grid_center"], s["grid_half_width"], s["grid_nodes"])
    return SolverParams(delta_scale=s["delta_scale"], picard_tol=s["picard_tol"],
                        picard_max_iter=s["picard_max_iter"], spatial_grid=grid,
                        quadrature_nodes=s["quadrature_nodes"],
                        contraction_guard=s["contraction_guard"], n_steps=config.n_steps)


def example1_params(p: dict) -> Example1Params:
    return Example1Params(a=p["a"], b=p["b"], c=p["c"], t0=p["t0"], T=p["T"], xi=p["xi"],
                          table_steps=p["table_steps"])


def lq_spec(p: dict) -> LQSpec:
    kw = {k: v for k, v in p.items() if k != "x0"}
    return LQSpec(**kw)


def build_problem(config: ExperimentConfig):
    """FBSDE problem plus an optional closed-form solution ``noise -> solution``."""
    fam, p = config.problem["family"], config.problem["params"]
    if fam == "example1":
        ep = example1_params(p)
        return example1_problem(ep), lambda noise, xi=None: example1_closed_form(ep, noise, xi)
    if fam == "gaussian-linear":
        prob = gaussian_linear_problem(p["phi_slope"], p["t0"], p["T"], p["xi"])
        return prob, lambda noise, xi=None: gaussian_linear_oracle(
            p["phi_slope"], noise.grid, noise, p["xi"] if xi is None else float(np.ravel(xi)[0]))
    if fam == "affine":
        blocks = {k: v for k, v in p.items() if k not in ("n", "m", "t0", "T", "xi")}
        xi = np.broadcast_to(np.atleast_1d(np.asarray(p["xi"], dtype=float)), (p["n"],))
        return affine_problem(p["n"], p["m"], p["t0"], p["T"], xi.copy(), **blocks), None
    if fam == "lq":
        x0 = np.broadcast_to(np.atleast_1d(np.asarray(p["x0"], dtype=float)), (p["n"],))
        return build_hamiltonian_fbsde(lq_spec(p), xi=x0.copy()), None
    if fam == "polynomial":
        coef = polynomial_coefficients(p["terms"], p["L"], p["K"], p["L_sigma"])
        return FBSDEProblem(coef, 1, 1, p["t0"], p["T"], [p["xi"]]), None
    raise ConfigError(f"unknown problem family {fam!r}")


def _noise(config: ExperimentConfig, problem):
    grid = build_grid(problem.t0, problem.T, config.n_steps)
    return sample_brownian(grid, config.n_paths, substream_seed(config.seed, "brownian"))


def _field(config, problem):
    fld = build_decoupling_field(problem, solver_params(config))
    info = {"delta": fld.delta, "n_blocks": len(fld.blocks),
            "max_picard_iterations": int(np.max(fld.iterations)),
            "max_contraction_ratio": float(np.max(fld.ratios)),
            "max_substeps": int(np.max(fld.substeps)),
            "terminal_interp_error": fld.terminal_interp_error}
    return fld, info


def _component_stats(name, values):
    out = {}
    for j in range(values.shape[-1]):
        sfx = "" if values.shape[-1] == 1 else f"_{j}"
        out[f"mean_{name}{sfx}"] = values[..., j].mean(axis=0)
        out[f"sd_{name}{sfx}"] = values[..., j].std(axis=0, ddof=1) if values.shape[0] > 1 \
            else np.zeros(values.shape[1])
    return out


def _run_solve(config):
    problem, exact = build_problem(config)
    fld, info = _field(config, problem)
    noise = _noise(config, problem)
    xi = config.experiment["xi"]
    if xi is not None:
        xi = np.broadcast_to(np.atleast_1d(np.asarray(xi, dtype=float)), (problem.n,)).copy()
    sol = solve_global(problem, fld, noise, xi=xi)
    outputs = {"field": info, "terminal_residual_max": float(sol.terminal_residual.max()),
               "backward_residual_max": float(backward_residual(sol, problem).max())}
    if exact is not None and config.experiment["compare_oracle"]:
        outputs["oracle_errors"] = rms_errors(sol, exact(noise, xi))
    stats = {}
    for name, ens in (("X", sol.X), ("Y", sol.Y), ("Z", sol.Z)):
        stats.update(_component_stats(name, ens.values))
    rows = [{"t": float(t), **{k: float(v[i]) for k, v in stats.items()}}
            for i, t in enumerate(sol.grid.points)]
    return outputs, {"solution_table": rows}, list(sol.warnings)


def _run_field(config):
    problem, _ = build_problem(config)
    fld, info = _field(config, problem)
    nodes = fld.nodes()
    rows = []
    for i, t in enumerate(fld.times):
        vals = fld.values[i].reshape(-1, problem.m)
        slopes = fld.slope_at(i, nodes).reshape(len(nodes), -1)
        for x, v, s in zip(nodes, vals, slopes):
            row = {"t": float(t)}
            row.update({f"x_{j}": float(e) for j, e in enumerate(x)})
            row.update({f"u_{j}": float(e) for j, e in enumerate(v)})
            row.update({f"du_{j}": float(e) for j, e in enumerate(s)})
            rows.append(row)
    prof = field_lipschitz_profile(fld)
    lip = [{"t": float(t), "lipschitz": float(v)} for t, v in zip(fld.times, prof)]
    info["lipschitz_max"] = float(np.max(prof))
    return {"field": info}, {"field_table": rows, "lipschitz_table": lip}, list(fld.warnings)


def _stability_rows(config, problem, fld, noise):
    e = config.experiment
    kappa = slope_bound(fld, e["kappa_tolerance"])
    xi = np.atleast_1d(e["xi"])
    base = solve_global(problem, fld, noise, xi=xi)
    rows, warnings = [], list(base.warnings)
    for gap in e["gaps"]:
        other = solve_global(problem, fld, noise, xi=xi - gap)
        rep = stability_from_solutions(base, other, e["p"], kappa)
        rows.append({"gap": float(gap), **rep.row()})
        warnings.extend(w for w in other.warnings if w not in warnings)
    vals = [r["C_stab"] for r in rows]
    summary = {"kappa": kappa, "C_stab_spread": max(vals) / min(vals) if min(vals) > 0 else None,
               "max_violation_rate": max(r["violation_rate"] for r in rows),
               "subinterval_constants": subinterval_constants(base, fld.blocks, e["p"])}
    return rows, summary, warnings


def _run_lp_verify(config):
    problem, _ = build_problem(config)
    fld, info = _field(config, problem)
    noise = _noise(config, problem)
    e = config.experiment
    reps = estimate_lp_bound(problem, fld, noise, [np.atleast_1d(x) for x in e["xis"]], e["p"])
    lp_rows = [r.row() for r in reps]
    st_rows, st_summary, warnings = _stability_rows(config, problem, fld, noise)
    c = [r.C_hat for r in reps]
    outputs = {"field": info, "C_hat_max": max(c), "C_hat_spread": max(c) / min(c),
               "stability": st_summary}
    return outputs, {"lp_table": lp_rows, "stability_table": st_rows}, warnings


def _run_stability(config):
    problem, _ = build_problem(config)
    fld, info = _field(config, problem)
    noise = _noise(config, problem)
    rows, summary, warnings = _stability_rows(config, problem, fld, noise)
    return {"field": info, "stability": summary}, {"stability_table": rows}, warnings


def _run_lq(config):
    p, e = config.problem["params"], config.experiment
    spec = lq_spec(p)
    x0 = np.broadcast_to(np.asarray(p["x0"], dtype=float), (spec.n,)).copy()
    problem = build_hamiltonian_fbsde(spec, xi=x0)
    cert = monotonicity_certificate(spec, e["certificate_samples"],
                                    substream_seed(config.seed, "certificate"), problem)
    fld, info = _field(config, problem)
    noise = _noise(config, problem)
    sol = solve_global(problem, fld, noise, xi=x0)
    control = optimal_control_from_solution(spec, sol)
    cost = simulate_cost(spec, control, noise, x0)
    opt = optimality_test(spec, control, noise, x0, e["n_perturbations"], e["epsilon"],
                          substream_seed(config.seed, "perturbations"), e["n_pieces"])
    sol0 = solve_global(problem, fld, noise, xi=np.zeros(spec.n))
    pairing = ito_pairing_residual(spec, sol, sol0, problem)
    outputs = {"field": info, "certificate": cert.as_dict(),
               "cost": {"mean": cost.mean, "half_width": cost.half_width},
               "stationarity_residual": stationarity_residual(spec, sol, control),
               "optimality": {"all_margins_ok": opt.all_margins_ok, "mean_margin": opt.mean_margin,
                              "all_convex": opt.all_convex},
               "ito_pairing": {"residual": pairing.residual, "half_width": pairing.half_width}}
    tables = {"optimality_table": opt.rows()}
    try:
        ric = riccati_oracle(spec, fld.grid)
    except RestrictionError as exc:
        outputs["riccati"] = {"available": False, "reason": str(exc)}
    else:
        slopes = np.array([fld.slope_at(i, np.zeros((1, spec.n)))[0] for i in range(len(fld.times))])
        gap = float(np.max(np.abs(slopes - ric.P)))
        outputs["riccati"] = {"available": True, "value": ric.value(x0),
                              "max_field_slope_gap": gap}
        tables["riccati_table"] = [
            {"t": float(t), **{f"P_{i}{j}": float(ric.P[k, i, j]) for i in range(spec.n)
                               for j in range(spec.n)}}
            for k, t in enumerate(ric.grid.points)]
    return outputs, tables, list(sol.warnings)


def _run_oracle(config):
    problem, exact = build_problem(config)
    e = config.experiment
    study = convergence_study(problem, exact, e["n_steps_list"], config.n_paths,
                              substream_seed(config.seed, "brownian"), e["reference_steps"],
                              solver_params(config))
    rows = [dict(r, seed=config.seed) for r in study.rows]
    return ({"order": study.order, "final_rms_error": study.final_error(),
             "reference_steps": study.reference_steps}, {"convergence_table": rows}, [])


def _run_kp_gate(config):
    e = config.experiment
    d = KpInputs.defaults(e["p"])
    inputs = KpInputs(e["p"], e["K_upper"] if e["K_upper"] is not None else d.K_upper,
                      e["K_lower"] if e["K_lower"] is not None else d.K_lower)
    kp = compute_kp(inputs)
    gates = smallness_gates(kp, e["L_sigma"], e["K"], e["sqrtC1"])
    outputs = {"K_p": kp, "K_upper": inputs.K_upper, "K_lower": inputs.K_lower, **gates}
    if e["C1"] is not None and e["k"] is not None:
        outputs["audit_constant"] = audit_constant_growth(e["C1"], e["p"], e["k"])
    row = {"p": e["p"], "K_upper": inputs.K_upper, "K_lower": inputs.K_lower, "K_p": kp,
           "L_sigma": e["L_sigma"], "K": e["K"], "h51_product": gates["h51_product"],
           "h51": gates["h51"]}
    return outputs, {"kp_table": [row]}, []


RUNNERS = {"solve": _run_solve, "field": _run_field, "lp-verify": _run_lp_verify,
           "stability": _run_stability, "lq": _run_lq, "oracle": _run_oracle,
           "kp-gate": _run_kp_gate}


def run_experiment(config: ExperimentConfig, write: bool = True) -> RunReport:
    """Run one experiment; with ``write`` the report and tables land in the output dir."""
    start = time.perf_counter()
    if write:
        output_dir(config).mkdir(parents=True, exist_ok=True)
    outputs, tables, warnings = RUNNERS[config.kind](config)
    for rows in tables.values():
        for r in rows:
            if r.get("seed", config.seed) != config.seed:
                r["noise_seed"] = r["seed"]
            r["seed"] = config.seed
            r.setdefault("n_steps", config.n_steps)
    report = RunReport(config, outputs, tables, warnings)
    report.wall_clock = time.perf_counter() - start
    if write:
        out = output_dir(config)
        for name, rows in tables.items():
            report.files[name] = str(write_table(out / f"{name}.csv", rows))
        report.files["report"] = str(write_report(out / "report.json", report.as_dict()))
    return report
