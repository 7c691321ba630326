"""
The CFN (binary symmetric) channel model on a tree.

Edge parameters are kept on the ``theta`` scale, ``theta = 1 - 2p`` with
``p`` the flip probability; branch length is ``-ln(theta)``.  Spin
configurations are plain ``int8`` arrays with entries in {-1, +1}: full
samples are indexed by node id, leaf observations by position in
``tree.leaf_ids``.

Randomness
----------
Monte Carlo replicates are drawn in fixed blocks of ``BLOCK`` samples; block
``b`` of stream ``s`` uses ``np.random.default_rng([seed, s, b])``.  Results
therefore depend only on ``(seed, stream, sample index)`` and not on how
blocks are scheduled across workers.
"""

from __future__ import annotations

import csv
import itertools
import json
from dataclasses import dataclass

import numpy as np

from . import kernels
from .schedule import propagation_plan
from .tree import RootedView, TreeTopology

BLOCK = 4096


def block_rng(seed: int, stream: int, block: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(stream), int(block)])


def block_slices(n: int, block: int = BLOCK):
    """``(index, slice)`` pairs covering ``range(n)`` in fixed-size blocks."""
    return [(b, slice(lo, min(lo + block, n))) for b, lo in enumerate(range(0, n, block))]


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EdgeParameters:
    """Per-edge second eigenvalues; usable anywhere an array is expected."""

    theta: np.ndarray

    def __post_init__(self):
        theta = np.array(self.theta, dtype=float)
        if theta.ndim != 1:
            raise ValueError("theta must be one-dimensional")
        if np.any(np.abs(theta) > 1):
            raise ValueError("theta must lie in [-1, 1]")
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)

    def __array__(self, dtype=None, copy=None):
        return self.theta if dtype is None else self.theta.astype(dtype)

    def __len__(self):
        return len(self.theta)

    @property
    def p(self) -> np.ndarray:
        return (1.0 - self.theta) / 2.0

    @property
    def length(self) -> np.ndarray:
        if np.any(self.theta <= 0):
            raise ValueError("branch length needs theta > 0")
        return -np.log(self.theta)

    def to_json(self) -> str:
        return json.dumps({"schema_version": 1, "theta": self.theta.tolist()})

    @classmethod
    def from_json(cls, text: str):
        return cls(json.loads(text)["theta"])


def convert(value, source: str, target: str):
    """Convert between the ``theta``, ``p`` and ``length`` scales."""
    scales = ("theta", "p", "length")
    if source not in scales or target not in scales:
        raise ValueError(f"scales must be among {scales}")
    x = np.asarray(value, dtype=float)
    if source == "p":
        if np.any((x < 0) | (x >= 0.5)):
            raise ValueError("p must lie in [0, 1/2)")
        theta = 1 - 2 * x
    elif source == "length":
        if np.any(x < 0) or not np.all(np.isfinite(x)):
            raise ValueError("length must be finite and non-negative")
        theta = np.exp(-x)
    else:
        if np.any(np.abs(x) > 1):
            raise ValueError("theta must lie in [-1, 1]")
        theta = x
    if target == "theta":
        out = theta
    elif target == "p":
        out = (1 - theta) / 2
    else:
        if np.any(theta <= 0):
            raise ValueError("length is undefined for theta <= 0")
        out = -np.log(theta)
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class ParameterBox:
    """Per-edge interval ``[1 - 2*c_hi*delta, 1 - 2*c_lo*delta]`` on theta."""

    delta: float
    c_lo: float = 0.25
    c_hi: float = 0.5

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError("delta must be positive")
        if not 0 < self.c_lo <= self.c_hi:
            raise ValueError("need 0 < c_lo <= c_hi")
        if not self.c_hi * self.delta < 0.5:
            raise ValueError("need c_hi * delta < 1/2")

    @property
    def lo(self) -> float:
        return 1.0 - 2.0 * self.c_hi * self.delta

    @property
    def hi(self) -> float:
        return 1.0 - 2.0 * self.c_lo * self.delta

    @classmethod
    def from_interval(cls, lo: float, hi: float, c_hi: float = 0.5):
        """Box equal to ``[lo, hi]`` with the given ``c_hi`` scale."""
        if not 0 < lo <= hi < 1:
            raise ValueError("need 0 < lo <= hi < 1")
        delta = (1.0 - lo) / (2.0 * c_hi)
        return cls(delta, (1.0 - hi) / (2.0 * delta), c_hi)

    def contains(self, other: "ParameterBox") -> bool:
        return self.lo <= other.lo and other.hi <= self.hi

    def from_unit(self, u):
        """Map ``u`` in [0, 1] affinely onto the box; ``u=0`` is the low end."""
        return self.lo + np.asarray(u) * (self.hi - self.lo)


def sample_parameters(n_edges, box: ParameterBox, rng, size=None) -> np.ndarray:
    """Independent uniform draws in ``box``; shape ``(E,)`` or ``(size, E)``."""
    if isinstance(n_edges, TreeTopology):
        n_edges = n_edges.edge_count
    rng = np.random.default_rng(rng)
    shape = (n_edges,) if size is None else (size, n_edges)
    return box.from_unit(rng.random(shape))


def in_box(theta, box: ParameterBox) -> bool:
    theta = np.asarray(theta, dtype=float)
    return bool(np.all((theta >= box.lo) & (theta <= box.hi)))


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


def propagate_from(tree, theta, anchor, root_spin, uniforms, backend=None):
    """Deterministic part of broadcasting.

    ``theta`` is ``(E,)`` or ``(m, E)``, ``root_spin`` is ``(m,)`` and
    ``uniforms`` is ``(m, E)``; edge ``e`` flips when ``uniforms < p_e``.
    Returns ``(m, node_count)`` int8 spins indexed by node id.
    """
    plan = propagation_plan(tree, int(anchor))
    p = (1.0 - np.asarray(theta, dtype=float)) / 2.0
    sign = np.where(uniforms < p, -1, 1).astype(np.int8)
    spins = kernels.propagate(
        np.asarray(root_spin, dtype=np.int8),
        np.ascontiguousarray(sign.T),
        plan.parent_slot,
        plan.edge_of_slot,
        plan.levels,
        backend=backend,
    )
    out = np.empty((spins.shape[1], tree.node_count), dtype=np.int8)
    out[:, plan.nodes] = spins.T
    return out


def broadcast_sample(tree: TreeTopology, theta, anchor: int, rng, size=None):
    """Full-tree spins: uniform spin at ``anchor``, independent flips per edge.

    Returns ``(node_count,)`` for ``size=None``, else ``(size, node_count)``.
    """
    theta = np.asarray(theta, dtype=float)
    if np.any((theta <= 0) | (theta > 1)):
        raise ValueError("broadcasting needs theta in (0, 1]")
    rng = np.random.default_rng(rng)
    m = 1 if size is None else int(size)
    root_spin = rng.choice(np.array([-1, 1], dtype=np.int8), size=m)
    uniforms = rng.random((m, tree.edge_count))
    spins = propagate_from(tree, theta, anchor, root_spin, uniforms)
    return spins[0] if size is None else spins


def sample_leaves(tree: TreeTopology, theta, m: int, seed: int, stream: int = 0):
    """``m`` leaf observations ``(m, n_leaves)`` drawn block-wise from ``seed``."""
    anchor = tree.root if tree.root >= 0 else tree.leaf_ids[0]
    leaf_cols = np.array(tree.leaf_ids)
    out = np.empty((m, tree.n_leaves), dtype=np.int8)
    for b, sl in block_slices(m):
        rng = block_rng(seed, stream, b)
        k = sl.stop - sl.start
        full = broadcast_sample(tree, theta, anchor, rng, size=k)
        out[sl] = full[:, leaf_cols]
    return out


def leaf_spins(tree: TreeTopology, full) -> np.ndarray:
    """Restrict full-tree spins to the leaves (last axis)."""
    return np.asarray(full)[..., list(tree.leaf_ids)]


# ---------------------------------------------------------------------------
# Exact leaf law (test oracle)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LeafDistribution:
    """All ``2**n`` leaf configurations with their exact probabilities.

    ``leaves`` names the node id of each column of ``configs``.
    """

    leaves: tuple
    configs: np.ndarray
    probs: np.ndarray

    def prob(self, spins) -> float:
        spins = np.asarray(spins)
        bits = (spins < 0).astype(np.int64)
        idx = int(np.dot(bits, 1 << np.arange(len(self.leaves))[::-1]))
        return float(self.probs[idx])


def _all_configs(n: int) -> np.ndarray:
    return np.array(list(itertools.product((1, -1), repeat=n)), dtype=np.int8).reshape(2**n, n)


def _subgraph(obj):
    if isinstance(obj, RootedView):
        nodes = list(obj.order)
        edges = [(obj.parent[v], v, obj.parent_edge[v]) for v in obj.order if v != obj.root]
        leaves = list(obj.leaves)
        root = obj.root
    else:
        nodes = list(range(obj.node_count))
        edges = [(int(a), int(b), e) for e, (a, b) in enumerate(obj.edge_endpoints)]
        leaves = list(obj.leaf_ids)
        root = obj.root if obj.root >= 0 else int(np.argmax(obj.degree))
    return nodes, edges, leaves, root


MAX_ENUM_LEAVES = 16
_DIRECT_NODE_LIMIT = 22


def enumerate_leaf_distribution(obj, theta, max_leaves: int = MAX_ENUM_LEAVES) -> LeafDistribution:
    """Exact law of the leaf spins of a tree or rooted view.

    Small cases sum ``(1/2) prod_e (1 + tau_u tau_v theta_e)/2`` over every
    assignment of the internal spins.  Larger ones (more than 22 nodes) use
    per-node conditional tables over leaf configurations, which is the same
    sum reorganised.
    """
    theta = np.asarray(theta, dtype=float)
    nodes, edges, leaves, root = _subgraph(obj)
    n = len(leaves)
    if n > max_leaves:
        raise ValueError(f"enumeration limited to {max_leaves} leaves, got {n}")
    configs = _all_configs(n)
    if len(nodes) <= _DIRECT_NODE_LIMIT:
        probs = _direct_sum(nodes, edges, leaves, configs, theta)
    else:
        probs = _table_sum(obj, nodes, edges, leaves, root, theta)
    return LeafDistribution(tuple(leaves), configs, probs)


def _direct_sum(nodes, edges, leaves, configs, theta):
    internal = [v for v in nodes if v not in set(leaves)]
    col = {v: i for i, v in enumerate(leaves)}
    icol = {v: i for i, v in enumerate(internal)}
    inner = _all_configs(len(internal))  # (2^k, k)
    # weight[leaf config, internal config]
    weight = np.full((len(configs), len(inner)), 0.5)
    for a, b, e in edges:
        ta = configs[:, col[a]][:, None] if a in col else inner[:, icol[a]][None, :]
        tb = configs[:, col[b]][:, None] if b in col else inner[:, icol[b]][None, :]
        weight = weight * (1.0 + ta * tb * theta[e]) / 2.0
    return weight.sum(axis=1)


def _table_sum(obj, nodes, edges, leaves, root, theta):
    adj = {v: [] for v in nodes}
    for a, b, e in edges:
        adj[a].append((b, e))
        adj[b].append((a, e))
    leafset = set(leaves)

    def table(v, parent):
        # returns (leaf order, T[s, cfg]) with s index 0 -> +1, 1 -> -1
        if v in leafset and parent is not None:
            return [v], np.array([[1.0, 0.0], [0.0, 1.0]])
        order = [v] if v in leafset else []
        T = np.array([[1.0, 0.0], [0.0, 1.0]]) if v in leafset else np.ones((2, 1))
        for w, e in adj[v]:
            if w == parent:
                continue
            sub_order, S = table(w, v)
            M = np.array([[1 + theta[e], 1 - theta[e]], [1 - theta[e], 1 + theta[e]]]) / 2.0
            child = M @ S
            T = np.einsum("si,sj->sij", T, child).reshape(2, -1)
            order = order + sub_order
        return order, T

    order, T = table(root, None)
    probs = 0.5 * T.sum(axis=0)
    # reorder columns from traversal order to ``leaves`` order
    n = len(leaves)
    pos = [order.index(v) for v in leaves]
    probs = probs.reshape((2,) * n).transpose(pos).reshape(-1)
    return probs


# ---------------------------------------------------------------------------
# CSV / JSON
# ---------------------------------------------------------------------------


def write_leaf_csv(path, tree: TreeTopology, spins) -> None:
    spins = np.atleast_2d(np.asarray(spins))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(tree.leaf_labels)
        w.writerows(spins.tolist())


def read_leaf_csv(path, tree: TreeTopology) -> np.ndarray:
    """Read a leaf matrix and reorder its columns to ``tree.leaf_ids``."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty CSV")
    header = rows[0]
    missing = set(tree.leaf_labels) - set(header)
    if missing:
        raise ValueError(f"{path}: missing leaf columns {sorted(missing)}")
    data = np.array([[int(x) for x in r] for r in rows[1:] if r], dtype=np.int8)
    if data.size and not np.all(np.abs(data) == 1):
        raise ValueError(f"{path}: entries must be +1 or -1")
    idx = [header.index(lab) for lab in tree.leaf_labels]
    return data.reshape(-1, len(header))[:, idx]


def theta_to_json(theta) -> str:
    return EdgeParameters(theta).to_json()

