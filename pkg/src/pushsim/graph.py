"""Directed graphs for consensus runs.

Nodes are labelled 1..n.  An edge is an ordered pair (j, i) meaning node i
can send to node j, so j is a receiver of i.  This matches the convention
used throughout the package: column i of a weight matrix belongs to sender i.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property

Edge = tuple[int, int]


@dataclass(frozen=True)
class Digraph:
    """Immutable digraph on nodes 1..n with edge set {(receiver, sender)}."""

    n: int
    edges: frozenset[Edge]

    @cached_property
    def out_neighbors(self) -> dict[int, tuple[int, ...]]:
        """Map sender -> sorted receivers."""
        out: dict[int, list[int]] = {i: [] for i in self.nodes}
        for j, i in self.edges:
            out[i].append(j)
        return {i: tuple(sorted(v)) for i, v in out.items()}

    @cached_property
    def in_neighbors(self) -> dict[int, tuple[int, ...]]:
        """Map receiver -> sorted senders."""
        inc: dict[int, list[int]] = {i: [] for i in self.nodes}
        for j, i in self.edges:
            inc[j].append(i)
        return {j: tuple(sorted(v)) for j, v in inc.items()}

    @property
    def nodes(self) -> range:
        return range(1, self.n + 1)

    @cached_property
    def sorted_edges(self) -> tuple[Edge, ...]:
        return tuple(sorted(self.edges))


def build_digraph(n: int, edges) -> Digraph:
    """Validate and build a Digraph.

    Raises ValueError for n < 1, endpoints outside 1..n, or self-loops.
    Duplicate edges collapse silently.
    """
    if n < 1:
        raise ValueError(f"need at least one node, got n={n}")
    edge_set = set()
    for pair in edges:
        j, i = int(pair[0]), int(pair[1])
        if not (1 <= j <= n) or not (1 <= i <= n):
            raise ValueError(f"edge ({j}, {i}) has endpoint outside 1..{n}")
        if j == i:
            raise ValueError(f"self-loop ({j}, {i}) not allowed; self-weights are implicit")
        edge_set.add((j, i))
    return Digraph(n=n, edges=frozenset(edge_set))


def is_strongly_connected(g: Digraph) -> bool:
    """True iff the digraph has exactly one strongly connected component of size n.

    Iterative Tarjan over the out-adjacency; a single-node graph with no
    edges counts as strongly connected.
    """
    n = g.n
    if n == 1:
        return True
    index_of: dict[int, int] = {}
    lowlink: dict[int, int] = {}
    on_stack: set[int] = set()
    stack: list[int] = []
    counter = 0
    scc_sizes: list[int] = []

    for root in g.nodes:
        if root in index_of:
            continue
        work = [(root, iter(g.out_neighbors[root]))]
        index_of[root] = lowlink[root] = counter
        counter += 1
        stack.append(root)
        on_stack.add(root)
        while work:
            v, it = work[-1]
            advanced = False
            for w in it:
                if w not in index_of:
                    index_of[w] = lowlink[w] = counter
                    counter += 1
                    stack.append(w)
                    on_stack.add(w)
                    work.append((w, iter(g.out_neighbors[w])))
                    advanced = True
                    break
                if w in on_stack:
                    lowlink[v] = min(lowlink[v], index_of[w])
            if advanced:
                continue
            work.pop()
            if work:
                parent = work[-1][0]
                lowlink[parent] = min(lowlink[parent], lowlink[v])
            if lowlink[v] == index_of[v]:
                size = 0
                while True:
                    w = stack.pop()
                    on_stack.discard(w)
                    size += 1
                    if w == v:
                        break
                scc_sizes.append(size)
                if len(scc_sizes) > 1:
                    return False
    return len(scc_sizes) == 1 and scc_sizes[0] == n


def check_protocol_usable(g: Digraph) -> None:
    """Reject graphs too small or not strongly connected for a protocol run."""
    if g.n <= 2:
        raise ValueError(f"protocol runs need more than 2 nodes, got n={g.n}")
    if not is_strongly_connected(g):
        raise ValueError("digraph is not strongly connected")


def random_strongly_connected(n: int, extra_edge_prob: float, seed: int) -> Digraph:
    """Seeded random strongly connected digraph.

    Builds a directed ring over a random permutation of 1..n, then adds each
    remaining ordered pair independently with probability extra_edge_prob.
    Candidate pairs are visited in sorted (receiver, sender) order with one
    uniform draw each, so the result is a pure function of (n, prob, seed).
    """
    if n <= 2:
        raise ValueError(f"need n > 2, got n={n}")
    if not 0.0 <= extra_edge_prob <= 1.0:
        raise ValueError(f"extra_edge_prob must be in [0, 1], got {extra_edge_prob}")
    rng = _graph_rng(seed)
    perm = [int(v) + 1 for v in rng.permutation(n)]
    ring = {(perm[(t + 1) % n], perm[t]) for t in range(n)}
    edges = set(ring)
    for j in range(1, n + 1):
        for i in range(1, n + 1):
            if j == i or (j, i) in ring:
                continue
            if rng.random() < extra_edge_prob:
                edges.add((j, i))
    return Digraph(n=n, edges=frozenset(edges))


def _graph_rng(seed: int):
    import numpy as np

    # own seed domain so graph draws never collide with protocol streams
    return np.random.default_rng((0x67726170, seed))


# Fixed 5-node demo used by the experiment harness and the docs.
DEMO_EDGES: frozenset[Edge] = frozenset(
    {(2, 1), (3, 2), (4, 3), (5, 4), (1, 5), (3, 1), (5, 2)}
)


def demo_digraph() -> Digraph:
    """The 5-node strongly connected demo digraph (ring 1-2-3-4-5 plus two chords)."""
    return build_digraph(5, DEMO_EDGES)


def save_digraph(g: Digraph, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(digraph_to_dict(g), fh)
        fh.write("\n")


def load_digraph(path) -> Digraph:
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    return digraph_from_dict(data)


def digraph_to_dict(g: Digraph) -> dict:
    return {"n": g.n, "edges": [list(e) for e in g.sorted_edges]}


def digraph_from_dict(data: dict) -> Digraph:
    try:
        n = int(data["n"])
        edges = data["edges"]
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed digraph object: {exc}") from exc
    return build_digraph(n, edges)
