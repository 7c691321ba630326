"""Root reconstruction and branch-length estimation for the CFN model on binary trees."""

from .estimator import FitConfig, FitResult, coordinate_sweep, fit, optimize_edge
from .kernels import BACKEND, HAVE_NUMBA
from .likelihood import grad_all, grad_edge, log_likelihood, log_likelihood_dataset
from .magnetization import (
    all_messages,
    classify_trichotomy,
    default_constants,
    q_combine,
    root_magnetization,
)
from .model import ParameterBox, sample_leaves, sample_parameters
from .tree import (
    TreeTopology,
    balanced_tree,
    caterpillar_tree,
    complete_tree,
    descendant_subtree,
    parse_newick,
    random_binary_tree,
    whole_tree_view,
    write_newick,
)

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "HAVE_NUMBA", "FitConfig", "FitResult", "ParameterBox", "TreeTopology", "all_messages",
    "balanced_tree", "caterpillar_tree", "classify_trichotomy", "complete_tree", "coordinate_sweep",
    "default_constants", "descendant_subtree", "fit", "grad_all", "grad_edge", "log_likelihood",
    "log_likelihood_dataset", "optimize_edge", "parse_newick", "q_combine", "random_binary_tree",
    "root_magnetization", "sample_leaves", "sample_parameters", "whole_tree_view", "write_newick",
]
