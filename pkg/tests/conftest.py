import numpy as np
import pytest

from cfnrecon.tree import complete_tree, parse_newick, random_binary_tree


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def quartet():
    tree, theta = parse_newick("((A:0.1,B:0.2):0.15,(C:0.05,D:0.3):0.1);")
    return tree, theta


@pytest.fixture
def two_leaf():
    return parse_newick("(A:0.1,B:0.1);")


@pytest.fixture
def depth3():
    return complete_tree(3)


@pytest.fixture(params=[3, 5, 8])
def small_tree(request):
    return random_binary_tree(request.param, np.random.default_rng(request.param))


def random_spins(rng, m, n):
    return rng.choice(np.array([-1, 1], dtype=np.int8), size=(m, n))


def pytest_terminal_summary(terminalreporter):
    from . import test_acceptance

    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(test_acceptance.RESULTS):
            terminalreporter.write_line(line)
