import numpy as np
import pytest

from fbsdelab.model import freeze_linear
from fbsdelab.oracles import (Example1Params, backward_residual, convergence_study,
                              example1_closed_form, example1_problem, gaussian_linear_oracle,
                              gaussian_linear_problem, rms_errors)
from fbsdelab.solver import SolutionEnsemble
from fbsdelab.stochastic import PathEnsemble, build_grid, sample_brownian

PT = np.array([[0.7], [-1.3]])


def test_all_zero_profiles_give_zero_problem():
    prob = example1_problem(Example1Params(a=0.0, b=0.0, c=0.0))
    assert freeze_linear(prob).is_zero()


def test_example1_unit_profiles():
    prob = example1_problem(Example1Params())
    x, y, z = PT, np.array([[2.0], [0.5]]), np.zeros((2, 1))
    # the driver enters as dY = -f ds, hence the minus sign
    np.testing.assert_allclose(prob.eval("f", 0.4, x, y, z), -x)
    np.testing.assert_allclose(prob.eval_phi(x), x)
    np.testing.assert_allclose(prob.eval("sigma", 0.4, x, y, z), 1.0)
    np.testing.assert_allclose(prob.eval("b", 0.4, x, y, z), 0.0)


def test_example1_coupled_profiles():
    prob = example1_problem(Example1Params(a=1.0, b=1.0))
    x, y, z = PT, np.array([[2.0], [0.5]]), np.zeros((2, 1))
    s = 0.4
    np.testing.assert_allclose(prob.eval("b", s, x, y, z), y)
    np.testing.assert_allclose(prob.eval("f", s, x, y, z), -(x + s * y), rtol=1e-12)


def test_closed_form_zero():
    p = Example1Params(a=0.0, b=0.0, c=0.0, xi=5.0)
    sol = example1_closed_form(p, sample_brownian(build_grid(0, 1, 16), 10, 0))
    assert np.all(sol.X.values == 5) and np.all(sol.Y.values == 0) and np.all(sol.Z.values == 0)


def test_closed_form_unit_profiles():
    noise = sample_brownian(build_grid(0, 1, 32), 20, 1)
    sol = example1_closed_form(Example1Params(), noise)
    s = noise.grid.points
    X = 1 + noise.paths()
    np.testing.assert_allclose(sol.X.values[..., 0], X, atol=1e-13)
    np.testing.assert_allclose(sol.Y.values[..., 0], s * X, atol=1e-13)
    np.testing.assert_allclose(sol.Z.values[..., 0], np.broadcast_to(s, X.shape), atol=1e-13)


def test_closed_form_deterministic_growth():
    noise = sample_brownian(build_grid(0, 1, 64), 3, 2)
    sol = example1_closed_form(Example1Params(a=1.0, b=1.0, c=0.0), noise)
    s = noise.grid.points
    np.testing.assert_allclose(sol.X.values[0, :, 0], np.exp(s ** 2 / 2), rtol=1e-6)
    np.testing.assert_allclose(sol.Y.values[0, :, 0], s * np.exp(s ** 2 / 2), rtol=1e-6)
    assert np.all(sol.Z.values == 0)


def test_closed_form_rejects_short_grid():
    with pytest.raises(ValueError):
        example1_closed_form(Example1Params(T=2.0), sample_brownian(build_grid(0, 1, 4), 2, 0))


def test_backward_residual_zero():
    prob = gaussian_linear_problem(0.0)
    noise = sample_brownian(build_grid(0, 1, 8), 5, 0)
    grid = noise.grid
    z = PathEnsemble(grid, np.zeros((5, 9, 1)))
    sol = SolutionEnsemble(z, z, z, noise, np.zeros(5), {})
    assert np.all(backward_residual(sol, prob) == 0)


def test_backward_residual_order():
    p = Example1Params()
    prob = example1_problem(p)
    res = []
    base = sample_brownian(build_grid(0, 1, 32), 500, 4)
    for noise in (base, base.refine(), base.refine().refine()):
        res.append(backward_residual(example1_closed_form(p, noise), prob).mean())
    orders = -np.diff(np.log2(res))
    assert np.all(orders >= 0.9)


def test_backward_residual_detects_corruption():
    p = Example1Params()
    prob = example1_problem(p)
    noise = sample_brownian(build_grid(0, 1, 64), 10, 4)
    sol = example1_closed_form(p, noise)
    Y = sol.Y.values.copy()
    Y[:, 20] += 1.0
    bad = SolutionEnsemble(sol.X, PathEnsemble(noise.grid, Y), sol.Z, noise, sol.terminal_residual,
                           sol.provenance)
    assert np.all(backward_residual(bad, prob) >= 1 - 0.1)


def test_gaussian_oracle_cases():
    noise = sample_brownian(build_grid(0, 1, 16), 10, 0)
    zero = gaussian_linear_oracle(0.0, noise.grid, noise, 1.0)
    assert np.all(zero.Y.values == 0) and np.all(zero.Z.values == 0)
    unit = gaussian_linear_oracle(1.0, noise.grid, noise, 0.0)
    np.testing.assert_array_equal(unit.Y.values[..., 0], noise.paths())
    assert np.all(unit.Z.values == 1)
    assert gaussian_linear_oracle(3.0, noise.grid, noise, 2.0).Y.values[0, 0, 0] == 6.0


def test_oracle_residuals_converge():
    prob = gaussian_linear_problem(2.0)
    base = sample_brownian(build_grid(0, 1, 32), 200, 6)
    res = [backward_residual(gaussian_linear_oracle(2.0, n.grid, n, 0.0), prob).max()
           for n in (base, base.refine())]
    assert res[1] <= res[0] + 1e-12


def test_pointwise_example_inequality():
    p = Example1Params()
    noise = sample_brownian(build_grid(0, 1, 32), 100, 8)
    a, b = example1_closed_form(p, noise, 1.0), example1_closed_form(p, noise, -0.5)
    dY = np.abs(a.Y.values - b.Y.values)[..., 0]
    dX = np.abs(a.X.values - b.X.values)[..., 0]
    np.testing.assert_allclose(dY, noise.grid.points * dX, atol=1e-13)


def test_rms_errors_self_zero(ex1_exact64):
    assert rms_errors(ex1_exact64, ex1_exact64)["rms_error"] == 0


def test_convergence_study_small():
    p = Example1Params()
    st = convergence_study(example1_problem(p), lambda nz: example1_closed_form(p, nz),
                           [16, 32, 64], 500, 0)
    assert st.reference_steps == 256
    assert st.order >= 0.5
    errs = [r["rms_error"] for r in st.rows]
    assert errs[0] > errs[1] > errs[2]
