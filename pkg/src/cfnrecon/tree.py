"""
Tree topologies for the CFN broadcast model.

A :class:`TreeTopology` is an undirected tree stored as dense integer node
and edge ids.  Internal nodes normally have degree 3 (unrooted binary); one
node of degree 2 is tolerated so that rooted experiment trees can be used
directly, in which case ``root`` names it.

A :class:`RootedView` is the descendant subtree of ``root`` with respect to
``away_from``: every node whose path to ``away_from`` runs through ``root``.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

NO_NODE = -1


class NewickError(ValueError):
    """Malformed or unsupported Newick input."""

    def __init__(self, message: str, position: int | None = None):
        if position is not None:
            message = f"{message} (at position {position})"
        super().__init__(message)
        self.position = position


@dataclass(frozen=True, eq=False)
class TreeTopology:
    """Undirected tree with dense integer node and edge ids.

    Attributes
    ----------
    edge_endpoints : (E, 2) int array
        ``edge_endpoints[e] = (a, b)`` with ``a < b``.
    labels : dict
        Node id -> name; every leaf has one.
    root : int
        The degree-2 node of a rooted tree, or ``NO_NODE``.
    """

    node_count: int
    edge_endpoints: np.ndarray
    labels: dict = field(default_factory=dict)
    root: int = NO_NODE

    def __post_init__(self):
        ends = np.asarray(self.edge_endpoints, dtype=np.int64).reshape(-1, 2)
        ends = np.sort(ends, axis=1)
        ends.setflags(write=False)
        object.__setattr__(self, "edge_endpoints", ends)
        n = self.node_count
        if n < 2:
            raise ValueError("a tree needs at least two nodes")
        if len(ends) != n - 1:
            raise ValueError(f"{n} nodes need {n - 1} edges, got {len(ends)}")
        if ends.min() < 0 or ends.max() >= n or np.any(ends[:, 0] == ends[:, 1]):
            raise ValueError("edge endpoints out of range")

        adjacency = [[] for _ in range(n)]
        for e, (a, b) in enumerate(ends):
            adjacency[a].append((int(b), e))
            adjacency[b].append((int(a), e))
        object.__setattr__(self, "adjacency", tuple(tuple(nb) for nb in adjacency))

        degree = np.array([len(nb) for nb in adjacency])
        if np.any(degree > 3) or np.any(degree == 0):
            raise ValueError("node degrees must lie in {1, 2, 3}")
        two = np.flatnonzero(degree == 2)
        if n == 2:
            two = two[:0]
        if len(two) > 1 or (len(two) == 1 and int(two[0]) != self.root):
            raise ValueError("only the designated root may have degree 2")
        if self.root != NO_NODE and (n == 2 or degree[self.root] != 2):
            raise ValueError("root must be a degree-2 node")

        # connectivity: n-1 edges plus connected means acyclic
        seen = np.zeros(n, dtype=bool)
        seen[0] = True
        stack = [0]
        while stack:
            u = stack.pop()
            for v, _ in adjacency[u]:
                if not seen[v]:
                    seen[v] = True
                    stack.append(v)
        if not seen.all():
            raise ValueError("edges do not form a connected tree")

        leaf_ids = tuple(int(v) for v in np.flatnonzero(degree == 1))
        object.__setattr__(self, "leaf_ids", leaf_ids)
        object.__setattr__(self, "degree", degree)
        labels = dict(self.labels)
        for v in leaf_ids:
            labels.setdefault(v, f"L{v}")
        object.__setattr__(self, "labels", labels)

    @property
    def edge_count(self) -> int:
        return self.node_count - 1

    @property
    def n_leaves(self) -> int:
        return len(self.leaf_ids)

    @property
    def leaf_index(self) -> dict:
        """Node id -> column in a leaves-only spin vector."""
        return {v: i for i, v in enumerate(self.leaf_ids)}

    @property
    def leaf_labels(self) -> list:
        return [self.labels[v] for v in self.leaf_ids]

    def is_leaf(self, v: int) -> bool:
        return self.degree[v] == 1

    def neighbors(self, v: int) -> list:
        return [u for u, _ in self.adjacency[v]]

    def edge_between(self, u: int, v: int) -> int:
        for w, e in self.adjacency[u]:
            if w == v:
                return e
        raise ValueError(f"nodes {u} and {v} are not adjacent")

    def node_by_label(self, name: str) -> int:
        for v, lab in self.labels.items():
            if lab == name:
                return v
        raise KeyError(name)

    def resolve_node(self, ref) -> int:
        """Accept a node id or a label (string)."""
        if isinstance(ref, str):
            if ref.lstrip("-").isdigit() and ref not in self.labels.values():
                return int(ref)
            return self.node_by_label(ref)
        return int(ref)

    def dfs_edge_order(self, anchor: int | None = None) -> list:
        """Edge ids in depth-first (pre-order) order from ``anchor``."""
        if anchor is None:
            anchor = self.root if self.root != NO_NODE else self.leaf_ids[0]
        order = []
        stack = [(anchor, NO_NODE)]
        while stack:
            u, parent = stack.pop()
            children = [(v, e) for v, e in self.adjacency[u] if v != parent]
            for v, _ in reversed(children):
                stack.append((v, u))
            if parent != NO_NODE:
                order.append(self.edge_between(u, parent))
        return order

    def to_json(self, theta=None) -> str:
        """Debugging dump of nodes, edges, labels and (optionally) theta."""
        doc = {
            "schema_version": 1,
            "nodes": list(range(self.node_count)),
            "leaves": list(self.leaf_ids),
            "root": None if self.root == NO_NODE else self.root,
            "edges": self.edge_endpoints.tolist(),
            "labels": {str(k): v for k, v in sorted(self.labels.items())},
        }
        if theta is not None:
            doc["theta"] = [float(t) for t in np.asarray(theta)]
        return json.dumps(doc, indent=2)

    @classmethod
    def from_json(cls, text: str):
        doc = json.loads(text)
        root = doc.get("root")
        tree = cls(
            node_count=len(doc["nodes"]),
            edge_endpoints=np.array(doc["edges"], dtype=np.int64),
            labels={int(k): v for k, v in doc["labels"].items()},
            root=NO_NODE if root is None else int(root),
        )
        theta = doc.get("theta")
        return tree, (None if theta is None else np.array(theta, dtype=float))


@dataclass(frozen=True, eq=False)
class RootedView:
    """Descendant subtree of ``root`` with respect to ``away_from``.

    ``away_from == NO_NODE`` means the whole tree hangs from ``root``; this is
    how rooted experiment trees are used.  ``order`` lists the view's nodes
    in pre-order, so parents always precede children.
    """

    tree: TreeTopology
    root: int
    away_from: int
    parent: dict
    parent_edge: dict
    children: dict
    order: tuple

    @property
    def nodes(self) -> tuple:
        return self.order

    @property
    def leaves(self) -> tuple:
        return tuple(v for v in self.order if not self.children[v])

    @property
    def edges(self) -> list:
        return [self.parent_edge[v] for v in self.order if v != self.root]

    def postorder(self) -> list:
        return list(reversed(self.order))


def _hang(tree: TreeTopology, root: int, away_from: int) -> RootedView:
    parent = {root: NO_NODE}
    parent_edge = {root: NO_NODE}
    children = {}
    order = []
    stack = [root]
    while stack:
        u = stack.pop()
        order.append(u)
        kids = [v for v, _ in tree.adjacency[u] if v != parent[u] and v != away_from]
        children[u] = tuple(kids)
        for v in reversed(kids):
            parent[v] = u
            parent_edge[v] = tree.edge_between(u, v)
            stack.append(v)
    return RootedView(tree, root, away_from, parent, parent_edge, children, tuple(order))


def descendant_subtree(tree: TreeTopology, root: int, away_from: int) -> RootedView:
    """The subtree of nodes whose path to ``away_from`` passes through ``root``."""
    root = tree.resolve_node(root)
    away_from = tree.resolve_node(away_from)
    tree.edge_between(root, away_from)  # raises when not adjacent
    return _hang(tree, root, away_from)


def whole_tree_view(tree: TreeTopology, root: int | None = None) -> RootedView:
    """The full tree hung from ``root`` (default: the tree's own root)."""
    if root is None:
        if tree.root == NO_NODE:
            raise ValueError("tree has no designated root; pass one explicitly")
        root = tree.root
    return _hang(tree, tree.resolve_node(root), NO_NODE)


# ---------------------------------------------------------------------------
# Generators
# ---------------------------------------------------------------------------


def random_binary_tree(n_leaves: int, rng) -> TreeTopology:
    """Random unrooted binary tree by sequential leaf attachment.

    Each new leaf subdivides an edge chosen uniformly among the current ones.
    Leaves get ids ``0..n-1`` and labels ``t0..t{n-1}``.
    """
    if n_leaves < 2:
        raise ValueError("n_leaves must be >= 2")
    rng = np.random.default_rng(rng)
    edges = [[0, 1]]
    next_internal = n_leaves
    for leaf in range(2, n_leaves):
        k = int(rng.integers(len(edges)))
        a, b = edges[k]
        w = next_internal
        next_internal += 1
        edges[k] = [a, w]
        edges.append([w, b])
        edges.append([w, leaf])
    labels = {i: f"t{i}" for i in range(n_leaves)}
    return TreeTopology(next_internal, np.array(edges), labels)


def _rooted_from_children(children: list, labels: dict | None = None) -> TreeTopology:
    """Build a rooted tree (root = node 0) from per-node child lists."""
    edges = [[u, v] for u, kids in enumerate(children) for v in kids]
    labels = labels or {}
    n = len(children)
    leaf_no = 0
    out = {}
    for v in range(n):
        if not children[v]:
            out[v] = labels.get(v, f"t{leaf_no}")
            leaf_no += 1
    root = 0 if len(children[0]) == 2 else NO_NODE
    return TreeTopology(n, np.array(edges), out, root=root)


def complete_tree(depth: int) -> TreeTopology:
    """Rooted complete binary tree with ``2**depth`` leaves (heap numbering)."""
    if depth < 1:
        raise ValueError("depth must be >= 1")
    n = 2 ** (depth + 1) - 1
    children = [[2 * v + 1, 2 * v + 2] if 2 * v + 2 < n else [] for v in range(n)]
    return _rooted_from_children(children)


def caterpillar_tree(n_leaves: int) -> TreeTopology:
    """Rooted caterpillar: a spine where each spine node carries one leaf."""
    if n_leaves < 2:
        raise ValueError("caterpillar needs at least 2 leaves")
    children = [[]]
    spine = 0
    for _ in range(n_leaves - 2):
        leaf, nxt = len(children), len(children) + 1
        children[spine] = [leaf, nxt]
        children.extend([[], []])
        spine = nxt
    children[spine] = [len(children), len(children) + 1]
    children.extend([[], []])
    return _rooted_from_children(children)


def balanced_tree(n_leaves: int) -> TreeTopology:
    """Rooted binary tree with ``n_leaves`` leaves split as evenly as possible."""
    if n_leaves < 2:
        raise ValueError("balanced tree needs at least 2 leaves")
    children = [[]]
    queue = deque([(0, n_leaves)])
    while queue:
        v, k = queue.popleft()
        if k == 1:
            continue
        left, right = (k + 1) // 2, k // 2
        a, b = len(children), len(children) + 1
        children[v] = [a, b]
        children.extend([[], []])
        queue.append((a, left))
        queue.append((b, right))
    return _rooted_from_children(children)


EXPERIMENT_KINDS = ("complete", "caterpillar", "balanced")


def experiment_tree(kind: str, size: int):
    """Rooted experiment tree and its whole-tree view.

    ``kind`` is ``complete`` (``size`` = depth), ``caterpillar`` or
    ``balanced`` (``size`` = number of leaves).
    """
    if size < 1:
        raise ValueError("size must be >= 1")
    if kind == "complete":
        tree = complete_tree(size)
    elif kind == "caterpillar":
        tree = caterpillar_tree(size)
    elif kind == "balanced":
        tree = balanced_tree(size)
    else:
        raise ValueError(f"unknown experiment tree kind {kind!r}")
    return tree, whole_tree_view(tree)


# ---------------------------------------------------------------------------
# Newick
# ---------------------------------------------------------------------------

_PUNCT = set("(),:;[]'")


class _NewickReader:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0

    def skip(self):
        t = self.text
        while self.pos < len(t):
            c = t[self.pos]
            if c.isspace():
                self.pos += 1
            elif c == "[":
                end = t.find("]", self.pos)
                if end < 0:
                    raise NewickError("unterminated comment", self.pos)
                self.pos = end + 1
            else:
                break

    def peek(self):
        self.skip()
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def expect(self, ch):
        if self.peek() != ch:
            found = self.peek() or "end of input"
            raise NewickError(f"expected {ch!r}, found {found!r}", self.pos)
        self.pos += 1

    def label(self):
        self.skip()
        t = self.text
        if self.pos < len(t) and t[self.pos] == "'":
            start = self.pos
            self.pos += 1
            out = []
            while True:
                if self.pos >= len(t):
                    raise NewickError("unterminated quoted label", start)
                c = t[self.pos]
                if c == "'":
                    if t[self.pos + 1 : self.pos + 2] == "'":
                        out.append("'")
                        self.pos += 2
                        continue
                    self.pos += 1
                    return "".join(out)
                out.append(c)
                self.pos += 1
        start = self.pos
        while self.pos < len(t) and t[self.pos] not in _PUNCT and not t[self.pos].isspace():
            self.pos += 1
        return t[start : self.pos]

    def length(self):
        if self.peek() != ":":
            return None
        self.pos += 1
        self.skip()
        start = self.pos
        t = self.text
        while self.pos < len(t) and (t[self.pos] in "+-.eE" or t[self.pos].isalnum()):
            self.pos += 1
        raw = t[start : self.pos]
        try:
            value = float(raw)
        except ValueError:
            raise NewickError(f"bad branch length {raw!r}", start) from None
        if not math.isfinite(value):
            raise NewickError(f"branch length must be finite, got {raw!r}", start)
        return value, start

    def subtree(self):
        """Return (label, children, position) for one clade."""
        pos = self.pos
        children = []
        if self.peek() == "(":
            self.pos += 1
            while True:
                child = self.subtree()
                ln = self.length()
                if ln is None:
                    raise NewickError("missing branch length", self.pos)
                children.append((child, ln[0], ln[1]))
                if self.peek() == ",":
                    self.pos += 1
                    continue
                self.expect(")")
                break
        name = self.label()
        return name, children, pos


def parse_newick(text: str, collapse_root: bool = True):
    """Parse Newick into ``(tree, theta)`` with ``theta = exp(-length)``.

    A degree-2 root is fused away (lengths add) unless ``collapse_root`` is
    False, in which case it is kept as ``tree.root``.  Every branch needs a
    finite length; the root's own length, if any, is ignored.
    """
    reader = _NewickReader(text)
    if reader.peek() == "":
        raise NewickError("empty Newick string", 0)
    top = reader.subtree()
    reader.length()
    reader.expect(";")
    if reader.peek() != "":
        raise NewickError("trailing characters after ';'", reader.pos)

    labels = {}
    edges = []
    lengths = []

    def walk(node, depth):
        name, children, pos = node
        v = len(labels)
        labels[v] = name
        n_kids = len(children)
        allowed = (2, 3) if depth == 0 else (2,)
        if n_kids and n_kids not in allowed:
            raise NewickError(f"non-binary node with {n_kids} children", pos)
        for child, ln, lpos in children:
            if ln < 0:
                raise NewickError(f"negative branch length {ln}", lpos)
            w = walk(child, depth + 1)
            edges.append([v, w])
            lengths.append(ln)
        return v

    if len(top[1]) == 1:
        raise NewickError("root with a single child", top[2])
    walk(top, 0)
    n = len(labels)
    if n == 1:
        raise NewickError("tree needs at least two leaves", 0)
    child_count = [0] * n
    for a, _ in edges:
        child_count[a] += 1
    node_labels = {v: lab for v, lab in labels.items() if child_count[v] == 0}
    for v, lab in node_labels.items():
        if not lab:
            node_labels[v] = f"L{v}"

    root_kids = [i for i, (a, _) in enumerate(edges) if a == 0]
    root = NO_NODE
    if len(root_kids) == 2:
        if collapse_root:
            i, j = root_kids
            a, b = edges[i][1], edges[j][1]
            fused = lengths[i] + lengths[j]
            keep = [k for k in range(len(edges)) if k not in (i, j)]
            edges = [[a, b]] + [edges[k] for k in keep]
            lengths = [fused] + [lengths[k] for k in keep]
            # drop node 0 and renumber densely
            edges = [[x - 1, y - 1] for x, y in edges]
            node_labels = {v - 1: lab for v, lab in node_labels.items()}
            n -= 1
        else:
            root = 0
    tree = TreeTopology(n, np.array(edges), node_labels, root=root)
    # TreeTopology sorts endpoints but keeps edge order, so lengths align
    theta = np.exp(-np.asarray(lengths, dtype=float))
    return tree, theta


def _fmt_length(theta: float) -> str:
    if not theta > 0:
        raise ValueError(f"theta must be positive to write a length, got {theta}")
    length = -math.log(theta)
    if length == 0:
        return "0.0"
    return f"{length:.12g}"


def _quote(name: str) -> str:
    if any(c in _PUNCT or c.isspace() for c in name):
        return "'" + name.replace("'", "''") + "'"
    return name


def write_newick(tree: TreeTopology, theta) -> str:
    """Newick with lengths ``-ln(theta)``; rooted trees keep their root."""
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (tree.edge_count,):
        raise ValueError("theta must have one entry per edge")
    if np.any(theta <= 0):
        raise ValueError("theta must be positive to write branch lengths")

    def clade(v, parent):
        kids = [(w, e) for w, e in tree.adjacency[v] if w != parent]
        if not kids:
            return _quote(tree.labels[v])
        inner = ",".join(f"{clade(w, v)}:{_fmt_length(theta[e])}" for w, e in kids)
        return f"({inner})"

    if tree.root != NO_NODE:
        return clade(tree.root, NO_NODE) + ";"
    if tree.node_count == 2:
        a, b = tree.leaf_ids
        return f"({_quote(tree.labels[a])}:{_fmt_length(theta[0])},{_quote(tree.labels[b])}:0.0);"
    start = next(v for v in range(tree.node_count) if tree.degree[v] == 3)
    return clade(start, NO_NODE) + ";"
