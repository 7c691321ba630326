"""
Leaf log-likelihood and its gradient in the edge parameters.

Both reduce to magnetizations.  Splitting the tree at edge ``e = {x, y}``
gives ``P(leaves) = P(leaves under x) P(leaves under y) (1 + th_e Z_x Z_y)``,
and neither subtree factor depends on ``th_e``, so
``d/d th_e log P = Z_x Z_y / (1 + th_e Z_x Z_y)``.
"""

from __future__ import annotations

import csv
import json

import numpy as np

from .magnetization import all_messages, view_log_marginal
from .tree import TreeTopology, descendant_subtree


class ZeroLikelihoodError(ArithmeticError):
    pass


def _check_open(theta_hat):
    theta_hat = np.asarray(theta_hat, dtype=float)
    if np.any(np.abs(theta_hat) >= 1):
        raise ValueError("log-likelihood needs theta_hat in (-1, 1)")
    return theta_hat


def log_likelihood(tree: TreeTopology, theta_hat, leaf_spins, backend=None):
    """``log P(leaf spins)`` under ``theta_hat``; scalar or one value per row.

    Computed by cutting edge 0 and multiplying the two subtree marginals by
    the edge factor, each marginal being accumulated in log space as
    ``sum log(1 + a b) - n_leaves log 2`` over its recursion steps.
    """
    theta_hat = _check_open(theta_hat)
    x, y = (int(v) for v in tree.edge_endpoints[0])
    zx, lx = view_log_marginal(descendant_subtree(tree, x, y), theta_hat, leaf_spins, backend)
    zy, ly = view_log_marginal(descendant_subtree(tree, y, x), theta_hat, leaf_spins, backend)
    th0 = theta_hat[..., 0]
    with np.errstate(divide="ignore"):
        out = lx + ly + np.log1p(th0 * np.asarray(zx) * np.asarray(zy))
    if not np.all(np.isfinite(out)):
        raise ZeroLikelihoodError("observation has probability zero")
    return out


def log_likelihood_dataset(tree, theta_hat, data, weights=None, backend=None) -> float:
    """Mean per-sample log-likelihood (weighted mean when ``weights`` is given)."""
    data = np.atleast_2d(np.asarray(data))
    if data.shape[0] == 0:
        raise ValueError("dataset is empty")
    ll = log_likelihood(tree, theta_hat, data, backend)
    if weights is None:
        return float(np.mean(ll))
    return float(np.sum(np.asarray(weights) * ll))


def _grad_from_products(w, theta_hat, edges=None):
    den = 1.0 + theta_hat * w
    if np.any(den <= 0):
        bad = np.unique(np.argwhere(den <= 0)[:, -1])
        ids = bad if edges is None else np.asarray(edges)[bad]
        raise ZeroDivisionError(f"vanishing denominator on edges {ids.tolist()}")
    return w / den


def grad_all(tree: TreeTopology, theta_hat, leaf_spins, backend=None):
    """Per-edge derivative of the log-likelihood; ``(E,)`` or ``(m, E)``."""
    theta_hat = _check_open(theta_hat)
    table = all_messages(tree, theta_hat, leaf_spins, backend=backend)
    return _grad_from_products(table.products(), theta_hat)


def grad_edge(tree: TreeTopology, theta_hat, leaf_spins, edge: int, backend=None):
    theta_hat = _check_open(theta_hat)
    zx, zy = all_messages(tree, theta_hat, leaf_spins, backend=backend).edge_pair(edge)
    w = zx * zy
    out = _grad_from_products(w, theta_hat[..., edge], edges=[edge])
    return float(out) if np.ndim(out) == 0 else out


def finite_difference_grad(tree: TreeTopology, theta_hat, leaf_spins, step: float = 1e-6):
    """Central differences of :func:`log_likelihood`, one edge at a time."""
    theta_hat = np.asarray(theta_hat, dtype=float)
    if np.any(np.abs(theta_hat) + step >= 1):
        raise ValueError("step pushes a parameter outside (-1, 1)")
    out = []
    for e in range(tree.edge_count):
        up = theta_hat.copy()
        dn = theta_hat.copy()
        up[..., e] += step
        dn[..., e] -= step
        out.append((log_likelihood(tree, up, leaf_spins) - log_likelihood(tree, dn, leaf_spins)) / (2 * step))
    return np.stack(out, axis=-1)


def population_gradient_closed_form(theta_true, theta_hat):
    """``(theta_true - theta_hat) / (1 - theta_hat**2)``."""
    theta_hat = np.asarray(theta_hat, dtype=float)
    if np.any(np.abs(theta_hat) >= 1):
        raise ValueError("|theta_hat| must be < 1")
    out = (np.asarray(theta_true, dtype=float) - theta_hat) / (1.0 - theta_hat**2)
    return float(out) if out.ndim == 0 else out


def gradient_report_json(grad, labels=None) -> str:
    grad = np.asarray(grad, dtype=float)
    doc = {"schema_version": 1, "gradient": {str(e): float(g) for e, g in enumerate(grad)}}
    if labels is not None:
        doc["edges"] = labels
    return json.dumps(doc, indent=2)


def write_loglik_csv(path, values) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_index", "log_likelihood"])
        for i, v in enumerate(np.atleast_1d(values)):
            w.writerow([i, repr(float(v))])
