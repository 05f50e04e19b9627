import numpy as np
import pytest

from fbsdelab.oracles import Example1Params, example1_closed_form, example1_problem
from fbsdelab.solver import SolverParams, build_decoupling_field
from fbsdelab.stochastic import build_grid, sample_brownian


@pytest.fixture(scope="session")
def ex1():
    return Example1Params()


@pytest.fixture(scope="session")
def ex1_problem(ex1):
    return example1_problem(ex1)


@pytest.fixture(scope="session")
def ex1_field64(ex1_problem):
    return build_decoupling_field(ex1_problem, SolverParams(n_steps=64))


@pytest.fixture(scope="session")
def noise64():
    return sample_brownian(build_grid(0.0, 1.0, 64), 4000, 11)


@pytest.fixture(scope="session")
def ex1_exact64(ex1, noise64):
    return example1_closed_form(ex1, noise64)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[key])
