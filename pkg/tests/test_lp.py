import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fbsdelab.errors import DomainError, MismatchedNoiseError
from fbsdelab.lp import (KpInputs, audit_constant_growth, compute_kp, estimate_lp_bound,
                         estimate_stability, lp_report, path_functionals, smallness_gates,
                         stability_from_solutions, subinterval_constants)
from fbsdelab.model import affine_problem, zero_problem
from fbsdelab.oracles import example1_closed_form, gaussian_linear_problem
from fbsdelab.solver import SolutionEnsemble, SolverParams, build_decoupling_field, solve_global
from fbsdelab.stochastic import PathEnsemble, build_grid, sample_brownian


def constant_solution(x, y, z, n_paths=4, n_steps=8):
    noise = sample_brownian(build_grid(0, 1, n_steps), n_paths, 0)
    g = noise.grid
    mk = lambda v: PathEnsemble(g, np.full((n_paths, n_steps + 1, 1), float(v)))
    return SolutionEnsemble(mk(x), mk(y), mk(z), noise, np.zeros(n_paths), {})


def test_zero_solution_functionals():
    assert np.all(path_functionals(constant_solution(0, 0, 0), 2) == 0)


def test_constant_x_functional():
    assert path_functionals(constant_solution(2, 0, 0), 3)[0, 0] == pytest.approx(8.0)


def test_unit_z_functional():
    assert path_functionals(constant_solution(0, 0, 1), 4)[0, 2] == pytest.approx(1.0)


@pytest.mark.parametrize("level,direction", [(1.5, 1), (0.5, -1)])
def test_functionals_monotone_in_p(level, direction):
    sol = constant_solution(level, level, level)
    lo, hi = path_functionals(sol, 2), path_functionals(sol, 4)
    assert np.all(direction * (hi - lo) >= 0)


def test_zero_problem_ladder():
    prob = zero_problem()
    fld = build_decoupling_field(prob, SolverParams(n_steps=8))
    noise = sample_brownian(build_grid(0, 1, 8), 50, 0)
    reps = estimate_lp_bound(prob, fld, noise, [[0.0]], 2)
    assert reps[0].C_hat == 0 and all(e == 0 for e in reps[0].estimates)


def test_empty_ladder_rejected(ex1_problem, ex1_field64, noise64):
    with pytest.raises(ValueError):
        estimate_lp_bound(ex1_problem, ex1_field64, noise64, [], 2)


def test_example1_ladder_matches_brute_force(ex1, ex1_problem, ex1_field64, noise64):
    reps = estimate_lp_bound(ex1_problem, ex1_field64, noise64, [0, 1, 2, 4], 4)
    for rep in reps:
        exact = lp_report(example1_closed_form(ex1, noise64, rep.xi[0]), 4)
        assert rep.C_hat == pytest.approx(exact.C_hat, rel=1e-9)
    spread = max(r.C_hat for r in reps) / min(r.C_hat for r in reps)
    # the closed form itself puts the spread near 4, above a factor of 3
    assert 3.0 < spread < 6.0


def test_doob_bracket_for_linear_oracle():
    prob = gaussian_linear_problem(1.0)
    fld = build_decoupling_field(prob, SolverParams(n_steps=128))
    noise = sample_brownian(build_grid(0, 1, 128), 10_000, 3)
    rep = estimate_lp_bound(prob, fld, noise, [[0.0]], 2)[0]
    assert 1.0 <= rep.estimates[1] <= 4.0


def test_report_half_widths_non_negative(ex1_problem, ex1_field64, noise64):
    rep = estimate_lp_bound(ex1_problem, ex1_field64, noise64, [1.0], 2)[0]
    assert all(h >= 0 for h in rep.half_widths) and rep.C_hat_half_width >= 0
    assert set(rep.row()) >= {"p", "xi", "C_hat", "seed", "n_steps", "n_paths"}


def test_stability_requires_distinct_initial_values(ex1_problem, ex1_field64, noise64):
    with pytest.raises(ValueError):
        estimate_stability(ex1_problem, ex1_field64, noise64, 2, 1.0, 1.0)


def test_stability_rejects_mismatched_noise(ex1_problem, ex1_field64):
    g = build_grid(0, 1, 64)
    a = solve_global(ex1_problem, ex1_field64, sample_brownian(g, 10, 1), xi=[1.0])
    b = solve_global(ex1_problem, ex1_field64, sample_brownian(g, 10, 2), xi=[0.0])
    with pytest.raises(MismatchedNoiseError):
        stability_from_solutions(a, b, 2, 1.0)


def test_example1_stability_constant(ex1_problem, ex1_field64, noise64):
    # X - X' = xi - xi', Y - Y' = s (xi - xi'), Z - Z' = 0, so the sum is 1 + 1 + 0
    rep = estimate_stability(ex1_problem, ex1_field64, noise64, 2, 1.0, 0.0)
    assert rep.C_stab == pytest.approx(2.0, rel=1e-9)
    assert rep.estimates[2] == pytest.approx(0.0, abs=1e-20)


def test_example1_violation_rate(ex1_problem, ex1_field64, noise64):
    rep = estimate_stability(ex1_problem, ex1_field64, noise64, 2, 1.0, 0.3)
    assert rep.kappa == pytest.approx(1.05)
    assert rep.violation_rate <= 0.01


def test_violations_detected_for_small_kappa(ex1_problem, ex1_field64, noise64):
    a = solve_global(ex1_problem, ex1_field64, noise64, xi=[1.0])
    b = solve_global(ex1_problem, ex1_field64, noise64, xi=[0.0])
    assert stability_from_solutions(a, b, 2, 0.5).violation_rate > 0.4


def test_common_noise_homogeneity_affine():
    prob = affine_problem(1, 1, 0.0, 1.0, [0.0], bx=0.3, by=0.2, fx=0.5, fy=-0.4, sx=0.2, s0=1.0,
                          H=0.8)
    fld = build_decoupling_field(prob, SolverParams(n_steps=32))
    noise = sample_brownian(build_grid(0, 1, 32), 2000, 5)
    base = solve_global(prob, fld, noise, xi=[1.0])
    p = 2.0
    sums = {}
    for gap in (1.0, 0.1, 0.01):
        rep = stability_from_solutions(base, solve_global(prob, fld, noise, xi=[1.0 - gap]), p, 2.0)
        sums[gap] = rep.C_stab * gap ** p
    for gap in (0.1, 0.01):
        ratio = sums[gap] / sums[1.0] / gap ** p
        assert 0.5 <= ratio <= 2.0


def test_subinterval_constants(ex1_problem, ex1_field64, noise64):
    sol = solve_global(ex1_problem, ex1_field64, noise64)
    rows = subinterval_constants(sol, ex1_field64.blocks, 2)
    assert len(rows) == len(ex1_field64.blocks)
    assert all(r["C_hat"] > 0 for r in rows)
    assert all(isinstance(r["nonuniform"], bool) for r in rows)


def test_audit_base_case():
    assert audit_constant_growth(1.0, 2, 1) == 1.0


def test_audit_two_blocks():
    assert audit_constant_growth(1.0, 2, 2) == 6.0
    assert audit_constant_growth(2.0, 4, 2) == 32.0


def test_audit_saturates():
    assert audit_constant_growth(10.0, 2, 40) == math.inf


@settings(max_examples=40, deadline=None)
@given(c=st.floats(0.01, 5), p=st.floats(1.0, 6), k=st.integers(1, 5))
def test_audit_increasing(c, p, k):
    base = audit_constant_growth(c, p, k)
    assert audit_constant_growth(c * 1.1, p, k) > base or base == math.inf
    assert audit_constant_growth(c, p, k + 1) > base or base == math.inf


def test_kp_values():
    assert compute_kp(KpInputs(2, 1, 1)) == 20 / 3
    assert compute_kp(KpInputs(3, 1, 1)) == pytest.approx(23 / 4, rel=1e-15)


def test_kp_domain():
    with pytest.raises(DomainError):
        KpInputs(1, 1, 1)
    with pytest.raises(DomainError):
        KpInputs(2, 1, 2)


def test_kp_default_bdg_constants():
    d = KpInputs.defaults(3)
    assert (d.K_upper, d.K_lower) == (12.0, 1.0)


@settings(max_examples=40, deadline=None)
@given(p=st.floats(1.1, 8), ku=st.floats(1.0, 50), kl=st.floats(0.1, 1.0))
def test_kp_monotone_in_bdg_constants(p, ku, kl):
    base = compute_kp(KpInputs(p, ku, kl))
    assert compute_kp(KpInputs(p, ku * 1.01, kl)) > base
    assert compute_kp(KpInputs(p, ku, kl * 0.99)) > base


def test_gates():
    assert smallness_gates(5.0, 0.0, 3.0)["h51"] is True
    assert smallness_gates(2.0, 0.5, 1.0)["h51"] is False
    g = smallness_gates(20 / 3, 0.1, 1.0)
    assert g["h51"] is True and g["h51_product"] == pytest.approx(2 / 3)
    assert g["theorem51"] is None
    assert smallness_gates(2.0, 0.1, 1.0, sqrtC1=2.0)["theorem51"] is True
