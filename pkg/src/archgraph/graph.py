"""Dense directed-graph primitives used by the ordering stage.

Graphs are small enough (a few thousand nodes at most) that dense boolean
adjacency matrices are both simpler and faster than adjacency lists.
"""

from __future__ import annotations

import heapq
import re
from pathlib import Path

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from archgraph.errors import CyclicInput, ParseError


class DirectedGraph:
    """Immutable digraph over nodes ``0..n-1``.

    ``adj[i, j]`` is True when node i is predicted better than node j.
    ``weights`` is an optional non-negative matrix that may be nonzero
    only on edges.
    """

    __slots__ = ("adj", "weights")

    def __init__(self, adj, weights=None):
        adj = np.array(adj, dtype=bool)
        if adj.ndim != 2 or adj.shape[0] != adj.shape[1] or adj.shape[0] < 1:
            raise ValueError(f"adjacency must be a non-empty square matrix, got {adj.shape}")
        if np.any(np.diagonal(adj)):
            loops = np.flatnonzero(np.diagonal(adj)).tolist()
            raise ValueError(f"self-loops are not allowed (nodes {loops})")
        if weights is not None:
            weights = np.array(weights, dtype=np.float64)
            if weights.shape != adj.shape:
                raise ValueError("weights must have the same shape as adj")
            if not np.all(np.isfinite(weights)) or np.any(weights < 0):
                raise ValueError("weights must be finite and non-negative")
            if np.any(weights[~adj] != 0):
                raise ValueError("weights may be nonzero only where adj is set")
            weights.setflags(write=False)
        adj.setflags(write=False)
        self.adj = adj
        self.weights = weights

    @classmethod
    def from_edges(cls, n, edges, weights=None):
        adj = np.zeros((n, n), dtype=bool)
        w = None if weights is None else np.zeros((n, n))
        for k, (i, j) in enumerate(edges):
            adj[i, j] = True
            if w is not None:
                w[i, j] = weights[k]
        return cls(adj, w)

    @property
    def n(self):
        return self.adj.shape[0]

    @property
    def n_edges(self):
        return int(self.adj.sum())

    def edges(self):
        """Edges as a list of ``(i, j)`` in row-major order."""
        return [(int(i), int(j)) for i, j in zip(*np.nonzero(self.adj))]

    def weight_matrix(self):
        """Weights, defaulting to 1.0 on every edge for unweighted graphs."""
        if self.weights is None:
            return self.adj.astype(np.float64)
        return self.weights

    def with_edges(self, keep):
        """Subgraph on the same nodes retaining only edges where ``keep``."""
        keep = np.asarray(keep, dtype=bool) & self.adj
        w = None if self.weights is None else np.where(keep, self.weights, 0.0)
        return DirectedGraph(keep, w)

    def subgraph(self, nodes):
        """Induced subgraph; node k of the result is ``nodes[k]``."""
        idx = np.asarray(nodes, dtype=np.intp)
        adj = self.adj[np.ix_(idx, idx)]
        w = None if self.weights is None else self.weights[np.ix_(idx, idx)]
        return DirectedGraph(adj, w)

    def __eq__(self, other):
        if not isinstance(other, DirectedGraph):
            return NotImplemented
        if not np.array_equal(self.adj, other.adj):
            return False
        return np.array_equal(self.weight_matrix(), other.weight_matrix())

    def __repr__(self):
        return f"DirectedGraph(n={self.n}, edges={self.n_edges})"


def is_acyclic(g: DirectedGraph) -> bool:
    """True iff ``g`` has no directed cycle (Kahn peeling)."""
    indeg = g.adj.sum(axis=0).astype(np.int64)
    stack = list(np.flatnonzero(indeg == 0))
    seen = 0
    while stack:
        v = stack.pop()
        seen += 1
        succ = np.flatnonzero(g.adj[v])
        indeg[succ] -= 1
        stack.extend(succ[indeg[succ] == 0])
    return seen == g.n


def scc(g: DirectedGraph) -> list[list[int]]:
    """Strongly connected components, each sorted, ordered by smallest member."""
    _, labels = connected_components(csr_matrix(g.adj), directed=True, connection="strong")
    groups: dict[int, list[int]] = {}
    for node, lab in enumerate(labels):
        groups.setdefault(int(lab), []).append(node)
    return sorted(groups.values(), key=lambda c: c[0])


def node_priority(g: DirectedGraph) -> np.ndarray:
    """Weighted out-degree minus weighted in-degree for every node."""
    w = g.weight_matrix() * g.adj
    return w.sum(axis=1) - w.sum(axis=0)


def topological_order(g: DirectedGraph) -> list[int]:
    """Kahn's algorithm with a deterministic tie rule.

    Among nodes that are ready at the same time, the one with the highest
    ``node_priority`` goes first; remaining ties go to the smaller id.
    """
    prio = node_priority(g)
    indeg = g.adj.sum(axis=0).astype(np.int64)
    heap = [(-prio[v], int(v)) for v in np.flatnonzero(indeg == 0)]
    heapq.heapify(heap)
    order = []
    while heap:
        _, v = heapq.heappop(heap)
        order.append(v)
        succ = np.flatnonzero(g.adj[v])
        indeg[succ] -= 1
        for u in succ[indeg[succ] == 0]:
            heapq.heappush(heap, (-prio[u], int(u)))
    if len(order) != g.n:
        raise CyclicInput("graph contains a directed cycle")
    return order


def reachability(g: DirectedGraph, order=None) -> np.ndarray:
    """Strict reachability: ``R[i, j]`` iff a path of length >= 1 leads i to j."""
    if order is None:
        order = topological_order(g)
    reach = np.zeros_like(g.adj)
    for v in reversed(order):
        succ = np.flatnonzero(g.adj[v])
        if succ.size:
            reach[v] = g.adj[v] | reach[succ].any(axis=0)
    return reach


def transitive_reduction(g: DirectedGraph) -> DirectedGraph:
    """Hasse diagram of a DAG: drop every edge implied by a longer path."""
    order = topological_order(g)
    reach = reachability(g, order)
    a = g.adj.astype(np.float32)
    # (A @ R)[i, j] > 0 means some successor of i reaches j.
    implied = (a @ reach.astype(np.float32)) > 0
    return g.with_edges(g.adj & ~implied)


_LINE = re.compile(r"\s+")


def read_edgelist(path) -> DirectedGraph:
    return parse_edgelist(Path(path).read_text())


def parse_edgelist(text: str) -> DirectedGraph:
    """Parse ``src dst weight`` lines; ``#`` starts a comment.

    A ``# nodes: N`` comment fixes the node count so trailing isolated
    nodes survive a round trip; otherwise n is one past the largest id.
    """
    n_declared = None
    edges, weights = [], []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        body, _, comment = raw.partition("#")
        m = re.match(r"\s*nodes:\s*(\d+)\s*$", comment)
        if m:
            n_declared = int(m.group(1))
        body = body.strip()
        if not body:
            continue
        parts = _LINE.split(body)
        if len(parts) not in (2, 3):
            raise ParseError(f"expected 'src dst [weight]', got {body!r}", lineno)
        try:
            i, j = int(parts[0]), int(parts[1])
            w = float(parts[2]) if len(parts) == 3 else 1.0
        except ValueError as exc:
            raise ParseError(str(exc), lineno) from None
        if i < 0 or j < 0:
            raise ParseError("node ids must be non-negative", lineno)
        edges.append((i, j))
        weights.append(w)
    n = max((max(e) for e in edges), default=-1) + 1
    if n_declared is not None:
        if n_declared < n:
            raise ParseError(f"declared {n_declared} nodes but ids reach {n - 1}")
        n = n_declared
    if n == 0:
        raise ParseError("empty graph")
    try:
        return DirectedGraph.from_edges(n, edges, weights)
    except ValueError as exc:
        raise ParseError(str(exc)) from None


def format_edgelist(g: DirectedGraph) -> str:
    w = g.weight_matrix()
    lines = [f"# nodes: {g.n}"]
    lines += [f"{i} {j} {float(w[i, j])!r}" for i, j in g.edges()]
    return "\n".join(lines) + "\n"


def write_edgelist(g: DirectedGraph, path) -> None:
    Path(path).write_text(format_edgelist(g))
