"""
Posterior root magnetizations under (possibly misspecified) edge parameters.

The magnetization at ``u`` over a descendant subtree is the conditional bias
``P(s_u=+1 | leaves) - P(s_u=-1 | leaves)``.  It is computed bottom-up:
leaves carry their observed spin and an internal node with children ``w1,
w2`` gets ``q(th1*Z1, th2*Z2)`` where ``q(s, t) = (s + t)/(1 + s t)``.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, fields
from fractions import Fraction

import numpy as np

from . import kernels
from .schedule import directed_index, message_schedule, view_schedule
from .tree import RootedView, TreeTopology

CLAMP = 1e-12

GOOD, MODERATE, SEVERE = 0, 1, 2
TIER_NAMES = ("good", "moderate", "severe")


class PoleError(ArithmeticError):
    """The recursion hit ``1 + s*t = 0`` (only possible with ``|theta| = 1``)."""


def q_combine(s, t):
    """``(s + t) / (1 + s t)`` for inputs in [-1, 1]; the pole ``s t = -1`` raises."""
    s = np.asarray(s, dtype=float)
    t = np.asarray(t, dtype=float)
    den = 1.0 + s * t
    if np.any(den == 0):
        raise PoleError("q(s, t) is undefined when s*t = -1")
    out = (s + t) / den
    return float(out) if out.ndim == 0 else out


def _clamped(theta, exact):
    theta = np.asarray(theta, dtype=float)
    if exact:
        return theta
    return np.clip(theta, -1.0 + CLAMP, 1.0 - CLAMP)


def _batch(tree, theta, spins):
    """Normalise to ``(L, m)`` spins and ``(E, m)`` theta; report whether batched."""
    spins = np.asarray(spins)
    single = spins.ndim == 1
    spins = np.atleast_2d(spins)
    if spins.shape[1] != tree.n_leaves:
        raise ValueError(f"expected {tree.n_leaves} leaf spins per sample, got {spins.shape[1]}")
    m = spins.shape[0]
    theta = np.asarray(theta, dtype=float)
    if theta.shape[-1] != tree.edge_count:
        raise ValueError(f"expected {tree.edge_count} edge parameters, got {theta.shape[-1]}")
    if theta.ndim == 1:
        theta_t = np.broadcast_to(theta[:, None], (tree.edge_count, m))
    else:
        if theta.shape[0] != m:
            raise ValueError("per-sample theta must have one row per sample")
        theta_t = theta.T
    return spins.T, theta_t, single


def root_magnetization(view: RootedView, theta_hat, leaf_spins, exact=False, backend=None):
    """Magnetization at ``view.root`` given leaf spins.

    ``leaf_spins`` is ``(n_leaves,)`` or ``(m, n_leaves)`` in
    ``view.tree.leaf_ids`` order (leaves outside the view are ignored);
    ``theta_hat`` is ``(E,)`` or per-sample ``(m, E)``.  Parameters are
    clamped to ``1 - 1e-12`` in magnitude unless ``exact`` is set.
    """
    tree = view.tree
    sched = view_schedule(view)
    spins, theta, single = _batch(tree, _clamped(theta_hat, exact), leaf_spins)
    vals, _ = kernels.run_schedule(spins, theta, sched, backend=backend)
    z = vals[sched.output]
    if not np.all(np.isfinite(z)):
        raise PoleError("magnetization recursion hit a pole")
    return float(z[0]) if single else z


def view_log_marginal(view: RootedView, theta_hat, leaf_spins, backend=None):
    """``(Z_root, log P(leaf spins of the view))`` via the same recursion."""
    tree = view.tree
    sched = view_schedule(view)
    spins, theta, single = _batch(tree, _clamped(theta_hat, False), leaf_spins)
    vals, logsum = kernels.run_schedule(spins, theta, sched, want_log=True, backend=backend)
    logp = logsum - len(view.leaves) * np.log(2.0)
    z = vals[sched.output]
    if single:
        return float(z[0]), float(logp[0])
    return z, logp


def brute_force_magnetization(view: RootedView, theta_hat, leaf_spins, max_leaves=12):
    """Magnetization by exact summation over the view's internal spins."""
    tree = view.tree
    theta_hat = np.asarray(theta_hat, dtype=float)
    leaves = view.leaves
    if len(leaves) > max_leaves:
        raise ValueError(f"brute force limited to {max_leaves} leaves")
    leaf_spins = np.asarray(leaf_spins)
    index = tree.leaf_index
    observed = {v: int(leaf_spins[index[v]]) for v in leaves}
    if len(view.order) == 1:
        return float(observed[view.root])
    internal = [v for v in view.order if v not in observed]
    pos = {v: i for i, v in enumerate(internal)}
    assign = np.array(list(itertools.product((1, -1), repeat=len(internal))), dtype=float)
    weight = np.full(len(assign), 0.5)
    for v in view.order:
        if v == view.root:
            continue
        u = view.parent[v]
        e = view.parent_edge[v]
        su = assign[:, pos[u]] if u in pos else observed[u]
        sv = assign[:, pos[v]] if v in pos else observed[v]
        weight = weight * (1.0 + su * sv * theta_hat[e]) / 2.0
    total = weight.sum()
    if total == 0:
        raise ZeroDivisionError("observed leaf spins have probability zero")
    return float(np.sum(weight * assign[:, pos[view.root]]) / total)


@dataclass(frozen=True)
class MessageTable:
    """All directed messages ``Z_{u->v}`` for one or many samples.

    ``values`` has shape ``(2E,)`` or ``(m, 2E)``; message ``u->v`` lives at
    ``2e`` when ``u`` is the smaller endpoint of edge ``e`` and ``2e+1``
    otherwise.
    """

    tree: TreeTopology
    values: np.ndarray

    def get(self, u: int, v: int):
        return self.values[..., directed_index(self.tree, u, v)]

    def edge_pair(self, e: int):
        """``(Z_a, Z_b)`` across edge ``e = {a, b}``, each away from the other."""
        return self.values[..., 2 * e], self.values[..., 2 * e + 1]

    def products(self):
        """``Z_x * Z_y`` for every edge; shape ``(E,)`` or ``(m, E)``."""
        return self.values[..., 0::2] * self.values[..., 1::2]


def all_messages(tree: TreeTopology, theta_hat, leaf_spins, exact=False, backend=None) -> MessageTable:
    """Every directed magnetization by one inward and one outward pass."""
    sched = message_schedule(tree)
    spins, theta, single = _batch(tree, _clamped(theta_hat, exact), leaf_spins)
    vals, _ = kernels.run_schedule(spins, theta, sched, backend=backend)
    bad = ~np.isfinite(vals)
    if bad.any():
        d = int(np.argwhere(bad)[0][0])
        a, b = tree.edge_endpoints[d // 2]
        u, v = (a, b) if d % 2 == 0 else (b, a)
        raise PoleError(f"pole in message {u}->{v} (edge {d // 2})")
    out = vals[:, 0] if single else vals.T
    return MessageTable(tree, out)


# ---------------------------------------------------------------------------
# Trichotomy
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrichotomyConstants:
    """Thresholds and tail-bound coefficients for the reconstruction tiers.

    ``C_rec``: good reconstruction needs ``sigma*Z >= 1 - C_rec*delta**2``;
    ``c_rec``: upper-tail failure probability coefficient (order ``delta``);
    ``c_anti``: severe failure means ``sigma*Z <= -c_anti``;
    ``C_anti``: severe failure probability coefficient (order ``delta**2``);
    ``delta0``: largest ``delta`` for which the bounds are guaranteed.
    """

    C_rec: float
    c_rec: float
    c_anti: float
    C_anti: float
    delta0: float

    def __post_init__(self):
        if min(self.C_rec, self.c_rec, self.c_anti, self.C_anti, self.delta0) <= 0:
            raise ValueError("trichotomy constants must be positive")
        if not self.c_anti < 1:
            raise ValueError("c_anti must lie in (0, 1)")

    def as_float(self) -> "TrichotomyConstants":
        return TrichotomyConstants(*(float(getattr(self, f.name)) for f in fields(self)))

    def as_dict(self) -> dict:
        return {f.name: float(getattr(self, f.name)) for f in fields(self)}


def constants_from_box(c_hat, C_hat, C_true) -> TrichotomyConstants:
    """Tier constants for hat-box ``[c_hat, C_hat]`` and true-box upper constant ``C_true``.

    Pass :class:`fractions.Fraction` inputs for exact arithmetic.
    """
    C_rec = Fraction(4, 5) * (9 * C_hat**2 / c_hat + 2 * C_hat) ** 2
    c_rec = 7 * C_true
    c_anti = 1 - 2 * c_hat / (3 * C_hat)
    C_anti = 78 * C_true**2
    delta0 = min(1 / (2380 * C_true), C_hat / (2 * C_rec), 5 / (72 * C_hat), c_hat)
    return TrichotomyConstants(C_rec, c_rec, c_anti, C_anti, delta0)


def default_constants() -> TrichotomyConstants:
    """Constants for box constants ``c = 1/4``, ``C = 1/2`` on both boxes."""
    return constants_from_box(Fraction(1, 4), Fraction(1, 2), Fraction(1, 2)).as_float()


def classify_trichotomy(sigma_u, z_u, delta, consts: TrichotomyConstants | None = None):
    """Tier of each outcome: ``GOOD``, ``MODERATE`` or ``SEVERE``.

    Severe wins if both conditions hold (only possible for large ``delta``).
    Scalar input returns the tier name.
    """
    consts = consts or default_constants()
    zeta = np.asarray(sigma_u) * np.asarray(z_u, dtype=float)
    tier = np.full(zeta.shape, MODERATE, dtype=np.int8)
    tier[zeta >= 1.0 - consts.C_rec * delta**2] = GOOD
    tier[zeta <= -consts.c_anti] = SEVERE
    if tier.ndim == 0:
        return TIER_NAMES[int(tier)]
    return tier


def write_magnetization_csv(path, sigma_u, z_u, tiers) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_index", "sigma_u", "z_u", "tier"])
        for i, (s, z, t) in enumerate(zip(np.asarray(sigma_u), np.asarray(z_u), np.asarray(tiers))):
            w.writerow([i, int(s), repr(float(z)), TIER_NAMES[int(t)]])


def read_magnetization_csv(path):
    """Return ``(sigma_u, z_u)`` arrays from a magnetization CSV."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    sigma = np.array([int(r["sigma_u"]) for r in rows], dtype=np.int8)
    z = np.array([float(r["z_u"]) for r in rows])
    return sigma, z
