"""Flatten trees into the integer arrays consumed by :mod:`cfnrecon.kernels`."""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .tree import NO_NODE, RootedView, TreeTopology


@dataclass(frozen=True, eq=False)
class Schedule:
    """Slots evaluated by ``q``-combination; see ``kernels.schedule_numpy``.

    ``output`` is the slot holding the result of interest (the view root for
    view schedules, unused for message schedules).
    """

    leaf_col: np.ndarray
    in1: np.ndarray
    e1: np.ndarray
    in2: np.ndarray
    e2: np.ndarray
    levels: tuple
    output: int = -1


def _finish(leaf_col, in1, e1, in2, e2, order, output=-1):
    arrays = [np.asarray(x, dtype=np.int64) for x in (leaf_col, in1, e1, in2, e2)]
    leaf_col, in1, e1, in2, e2 = arrays
    stage = np.zeros(len(leaf_col), dtype=np.int64)
    for k in order:
        s = stage[in1[k]]
        if in2[k] >= 0:
            s = max(s, stage[in2[k]])
        stage[k] = s + 1
    computed = np.asarray(order, dtype=np.int64)
    levels = []
    if len(computed):
        for s in range(1, int(stage[computed].max()) + 1):
            idx = computed[stage[computed] == s]
            if len(idx):
                levels.append(idx)
    for a in arrays:
        a.setflags(write=False)
    return Schedule(leaf_col, in1, e1, in2, e2, tuple(levels), output)


def view_schedule(view: RootedView) -> Schedule:
    """Bottom-up schedule whose ``output`` slot is the magnetization at the view root.

    Leaf columns index ``view.tree.leaf_ids``.  A root with three children
    (whole unrooted tree) is handled by chaining ``q``, which is associative.
    """
    return _view_schedule_cached(view)


@lru_cache(maxsize=64)
def _view_schedule_cached(view):
    tree = view.tree
    leaf_index = tree.leaf_index
    post = view.postorder()
    slot = {v: k for k, v in enumerate(post)}
    K = len(post)
    leaf_col, in1, e1, in2, e2 = [], [], [], [], []
    order = []
    extra = []
    for v in post:
        kids = view.children[v]
        if not kids:
            if v not in leaf_index:
                raise ValueError(f"view leaf {v} is not a leaf of the tree")
            leaf_col.append(leaf_index[v])
            in1.append(-1), e1.append(-1), in2.append(-1), e2.append(-1)
            continue
        leaf_col.append(-1)
        order.append(slot[v])
        c = list(kids)
        if len(c) == 3:
            # tmp = q(th_a Z_a, th_b Z_b); root = q(tmp, th_c Z_c)
            tmp = K + len(extra)
            extra.append((slot[c[0]], view.parent_edge[c[0]], slot[c[1]], view.parent_edge[c[1]]))
            in1.append(tmp), e1.append(-1)
            in2.append(slot[c[2]]), e2.append(view.parent_edge[c[2]])
        else:
            in1.append(slot[c[0]]), e1.append(view.parent_edge[c[0]])
            if len(c) == 2:
                in2.append(slot[c[1]]), e2.append(view.parent_edge[c[1]])
            else:
                in2.append(-1), e2.append(-1)
    for a, ea, b, eb in extra:
        leaf_col.append(-1)
        in1.append(a), e1.append(ea), in2.append(b), e2.append(eb)
    if extra:
        # the temporary must precede the root
        order = order[:-1] + [K] + order[-1:]
    return _finish(leaf_col, in1, e1, in2, e2, order, output=slot[view.root])


def directed_index(tree: TreeTopology, u: int, v: int) -> int:
    """Slot of message ``u -> v``: ``2e`` when ``u`` is the smaller endpoint, else ``2e+1``."""
    e = tree.edge_between(u, v)
    return 2 * e + (0 if tree.edge_endpoints[e][0] == u else 1)


@lru_cache(maxsize=64)
def message_schedule(tree: TreeTopology) -> Schedule:
    """Two-pass schedule producing every directed message ``Z_{u->v}``."""
    leaf_index = tree.leaf_index
    K = 2 * tree.edge_count
    leaf_col = np.full(K, -1)
    in1 = np.full(K, -1)
    e1 = np.full(K, -1)
    in2 = np.full(K, -1)
    e2 = np.full(K, -1)

    def fill(u, v):
        d = directed_index(tree, u, v)
        if tree.is_leaf(u):
            leaf_col[d] = leaf_index[u]
            return d, False
        others = [(w, e) for w, e in tree.adjacency[u] if w != v]
        w, e = others[0]
        in1[d], e1[d] = directed_index(tree, w, u), e
        if len(others) == 2:
            w, e = others[1]
            in2[d], e2[d] = directed_index(tree, w, u), e
        return d, True

    anchor = int(np.argmax(tree.degree))
    parent = {anchor: NO_NODE}
    pre = []
    stack = [anchor]
    while stack:
        u = stack.pop()
        pre.append(u)
        for w, _ in tree.adjacency[u]:
            if w != parent[u]:
                parent[w] = u
                stack.append(w)
    order = []
    for u in reversed(pre):  # inward
        if parent[u] != NO_NODE:
            d, computed = fill(u, parent[u])
            if computed:
                order.append(d)
    for u in pre:  # outward
        for w, _ in tree.adjacency[u]:
            if w != parent[u]:
                d, computed = fill(u, w)
                if computed:
                    order.append(d)
    return _finish(leaf_col, in1, e1, in2, e2, order)


@dataclass(frozen=True, eq=False)
class Propagation:
    """Pre-order node slots for broadcasting spins from ``nodes[0]``."""

    nodes: np.ndarray
    parent_slot: np.ndarray
    edge_of_slot: np.ndarray
    levels: tuple


@lru_cache(maxsize=64)
def propagation_plan(tree: TreeTopology, anchor: int) -> Propagation:
    nodes = [anchor]
    parent_slot = [-1]
    edge_of_slot = [-1]
    depth = [0]
    head = 0
    parent = {anchor: NO_NODE}
    while head < len(nodes):  # breadth-first keeps parents before children
        u = nodes[head]
        for w, e in tree.adjacency[u]:
            if w != parent[u]:
                parent[w] = u
                nodes.append(w)
                parent_slot.append(head)
                edge_of_slot.append(e)
                depth.append(depth[head] + 1)
        head += 1
    depth = np.array(depth)
    levels = tuple(np.flatnonzero(depth == d) for d in range(1, int(depth.max()) + 1))
    as_int = lambda x: np.asarray(x, dtype=np.int64)  # noqa: E731
    return Propagation(as_int(nodes), as_int(parent_slot), as_int(edge_of_slot), levels)
