import os
import subprocess
import sys

import numpy as np
import pytest

from cfnrecon import kernels
from cfnrecon.likelihood import log_likelihood
from cfnrecon.magnetization import all_messages
from cfnrecon.model import propagate_from
from cfnrecon.tree import balanced_tree, random_binary_tree

from .conftest import random_spins

needs_numba = pytest.mark.skipif(not kernels.HAVE_NUMBA, reason="numba not installed")


@needs_numba
@pytest.mark.parametrize("seed", range(5))
def test_messages_identical(seed):
    rng = np.random.default_rng(seed)
    tree = random_binary_tree(int(rng.integers(2, 40)), rng)
    theta = rng.uniform(-0.95, 0.95, tree.edge_count)
    spins = random_spins(rng, 50, tree.n_leaves)
    a = all_messages(tree, theta, spins, backend="numba").values
    b = all_messages(tree, theta, spins, backend="numpy").values
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-15)


@needs_numba
def test_loglik_identical():
    tree = balanced_tree(300)
    rng = np.random.default_rng(1)
    theta = rng.uniform(0.8, 0.95, tree.edge_count)
    spins = random_spins(rng, 20, tree.n_leaves)
    np.testing.assert_allclose(log_likelihood(tree, theta, spins, backend="numba"),
                               log_likelihood(tree, theta, spins, backend="numpy"), rtol=1e-13)


@needs_numba
def test_propagation_identical(quartet):
    tree, theta = quartet
    rng = np.random.default_rng(2)
    u = rng.random((100, tree.edge_count))
    root = rng.choice(np.array([-1, 1], dtype=np.int8), 100)
    a = propagate_from(tree, theta, 0, root, u, backend="numba")
    b = propagate_from(tree, theta, 0, root, u, backend="numpy")
    np.testing.assert_array_equal(a, b)


def test_unknown_backend():
    with pytest.raises(ValueError):
        kernels.get_backend("fortran")


def test_env_flag_selects_numpy():
    env = dict(os.environ, CFNRECON_BACKEND="numpy")
    out = subprocess.run([sys.executable, "-c", "from cfnrecon import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"


def test_env_flag_rejects_garbage():
    env = dict(os.environ, CFNRECON_BACKEND="gpu")
    out = subprocess.run([sys.executable, "-c", "import cfnrecon.kernels"], env=env, capture_output=True)
    assert out.returncode != 0
