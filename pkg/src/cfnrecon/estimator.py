"""
Branch-length estimation by cyclic coordinate maximization.

Each step fixes every parameter but ``th_e``.  With ``w_i = Z_x Z_y`` for
sample ``i`` (independent of ``th_e``), the one-dimensional objective is
``mean log(1 + th w_i)`` up to a constant, whose derivative
``mean w_i / (1 + th w_i)`` is strictly decreasing.  The maximizer is found
by bisection on the derivative.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import bisect

from .likelihood import log_likelihood_dataset
from .magnetization import all_messages
from .tree import TreeTopology


@dataclass(frozen=True)
class FitConfig:
    theta_min: float = 0.01
    theta_max: float = 1.0 - 1e-9
    tol: float = 1e-10
    max_sweeps: int = 100
    threshold: float = 1e-8
    order: tuple | None = None  # edge visit order; None means DFS order

    def __post_init__(self):
        if not -1 < self.theta_min < self.theta_max < 1:
            raise ValueError("need -1 < theta_min < theta_max < 1")
        if self.tol <= 0 or self.threshold <= 0:
            raise ValueError("tolerances must be positive")
        if self.max_sweeps < 0:
            raise ValueError("max_sweeps must be >= 0")

    @classmethod
    def full_range(cls, **kw):
        return cls(theta_min=-0.999, theta_max=0.999, **kw)


@dataclass
class FitResult:
    theta: np.ndarray
    max_change: list = field(default_factory=list)
    loglik: list = field(default_factory=list)
    initial_loglik: float = float("nan")
    reason: str = "max-sweeps"

    @property
    def sweeps(self) -> int:
        return len(self.max_change)

    def to_json(self) -> str:
        doc = asdict(self)
        doc["theta"] = np.asarray(self.theta).tolist()
        doc["schema_version"] = 1
        return json.dumps(doc, indent=2)


def edge_profile_products(tree: TreeTopology, theta_hat, data, edge: int, backend=None) -> np.ndarray:
    """``Z_x * Z_y`` across ``edge`` for every sample."""
    zx, zy = all_messages(tree, theta_hat, np.atleast_2d(data), backend=backend).edge_pair(edge)
    return zx * zy


def edge_derivative(products, theta: float, weights=None) -> float:
    """``mean_i w_i / (1 + theta w_i)`` (weighted when ``weights`` is given)."""
    w = np.asarray(products, dtype=float)
    den = 1.0 + theta * w
    if np.any(den <= 0):
        raise ZeroDivisionError("pole: 1 + theta*w = 0 for some sample")
    terms = w / den
    return float(np.mean(terms) if weights is None else np.dot(weights, terms))


def edge_objective(products, theta: float, weights=None) -> float:
    w = np.asarray(products, dtype=float)
    terms = np.log1p(theta * w)
    return float(np.mean(terms) if weights is None else np.dot(weights, terms))


def optimize_edge(products, config: FitConfig = FitConfig(), weights=None) -> float:
    """Maximizer of the one-edge objective on ``[theta_min, theta_max]``.

    Interior root of the derivative when it changes sign, otherwise the
    endpoint with the larger objective (``theta_min`` on ties).
    """
    lo, hi = config.theta_min, config.theta_max
    f_lo = edge_derivative(products, lo, weights)
    f_hi = edge_derivative(products, hi, weights)
    if f_lo > 0 > f_hi:
        return bisect(lambda th: edge_derivative(products, th, weights), lo, hi, xtol=config.tol, maxiter=200)
    if f_lo == 0:
        return lo
    if f_hi == 0:
        return hi
    g_lo = edge_objective(products, lo, weights)
    g_hi = edge_objective(products, hi, weights)
    return hi if g_hi > g_lo else lo


def coordinate_sweep(tree, theta_hat, data, config: FitConfig = FitConfig(), weights=None,
                     callback=None, backend=None) -> np.ndarray:
    """One Gauss-Seidel pass: each edge is re-optimised with the latest values of the others.

    ``callback(edge, theta_before)`` is invoked before each edge update.
    """
    theta = np.array(theta_hat, dtype=float)
    data = np.atleast_2d(data)
    order = config.order if config.order is not None else tree.dfs_edge_order()
    for e in order:
        if callback is not None:
            callback(e, theta.copy())
        w = edge_profile_products(tree, theta, data, e, backend=backend)
        theta[e] = optimize_edge(w, config, weights)
    return theta


def fit(tree, data, init, config: FitConfig = FitConfig(), weights=None, backend=None) -> FitResult:
    """Repeat sweeps until the largest parameter change drops below ``config.threshold``.

    ``reason`` is ``converged``, ``boundary`` (converged with some parameter
    on the search-interval boundary) or ``max-sweeps``.
    """
    theta = np.array(init, dtype=float)
    data = np.atleast_2d(data)
    result = FitResult(theta=theta.copy())
    result.initial_loglik = log_likelihood_dataset(tree, theta, data, weights, backend)
    for _ in range(config.max_sweeps):
        new = coordinate_sweep(tree, theta, data, config, weights, backend=backend)
        change = float(np.max(np.abs(new - theta)))
        theta = new
        result.max_change.append(change)
        result.loglik.append(log_likelihood_dataset(tree, theta, data, weights, backend))
        if change < config.threshold:
            on_edge = np.any((theta <= config.theta_min) | (theta >= config.theta_max))
            result.reason = "boundary" if on_edge else "converged"
            break
    result.theta = theta
    return result
