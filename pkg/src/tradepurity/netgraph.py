"""Resistance-weighted trade network: backbone, communities, boundary indices.

Edge weight is the reciprocal of pair resistance. The disparity filter keeps
edges whose share of an endpoint's strength is inconsistent with a uniform
split across that endpoint's degree; community detection is a seeded,
deterministic two-phase local-moving/aggregation optimizer of the weighted
modularity; the external-internal indices summarize how strongly a partition
confines degree and weight inside communities.
"""

from __future__ import annotations

import json
import logging
import math
import random
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_ALPHA_S = 0.05
DEFAULT_SEED = 42


class GraphError(ValueError):
    """Inputs violate a network-stage contract."""


@dataclass
class WeightedGraph:
    """Undirected graph over an ordered node list; edge keys (i, j) with i < j."""

    nodes: list[str]
    edges: dict[tuple[int, int], float]

    def __post_init__(self):
        n = len(self.nodes)
        for (i, j), w in self.edges.items():
            if not (0 <= i < j < n):
                raise GraphError(f"bad edge key ({i}, {j}); need 0 <= i < j < {n}")
            if not (math.isfinite(w) and w > 0):
                raise GraphError(f"edge ({i}, {j}) weight {w} must be positive and finite")

    @property
    def n(self) -> int:
        return len(self.nodes)

    def neighbors(self, i: int) -> dict[int, float]:
        out = {}
        for (a, b), w in self.edges.items():
            if a == i:
                out[b] = w
            elif b == i:
                out[a] = w
        return out

    def adjacency(self) -> list[dict[int, float]]:
        adj: list[dict[int, float]] = [dict() for _ in self.nodes]
        for (i, j), w in self.edges.items():
            adj[i][j] = w
            adj[j][i] = w
        return adj

    def degree(self, i: int) -> int:
        return len(self.neighbors(i))

    def strength(self, i: int) -> float:
        return sum(self.neighbors(i).values())


def build_graph(rmat, tpi=None) -> WeightedGraph:
    """Complete graph over the resistance matrix's countries with w = 1/r.

    `tpi` is an optional TpiVector used only for a coverage check (every
    scored country must be a node); it does not change the graph.
    """
    isos = list(rmat.isos)
    if tpi is not None:
        stray = sorted(set(tpi.values) - set(isos))
        if stray:
            raise GraphError(f"tpi covers countries outside the matrix: {stray[:5]}")
    ln_r = rmat.ln_r
    n = len(isos)
    edges = {}
    for i in range(n):
        for j in range(i + 1, n):
            edges[(i, j)] = math.exp(-ln_r[i, j])
    return WeightedGraph(nodes=isos, edges=edges)


def clustering_coefficient(g, node: str) -> float:
    """Topological C_i = 2 e_i / (k_i (k_i - 1)); 0 when fewer than 2 neighbors."""
    g = getattr(g, "base", g)
    try:
        i = g.nodes.index(node)
    except ValueError as exc:
        raise GraphError(f"unknown node {node!r}") from exc
    adj = g.adjacency()
    nbrs = sorted(adj[i])
    k = len(nbrs)
    if k < 2:
        return 0.0
    e = sum(
        1
        for a_idx, a in enumerate(nbrs)
        for b in nbrs[a_idx + 1 :]
        if b in adj[a]
    )
    return 2.0 * e / (k * (k - 1))


def mean_clustering(g) -> float:
    """Arithmetic mean of C_i over nodes with degree >= 2; 0 if there are none."""
    g = getattr(g, "base", g)
    adj = g.adjacency()
    values = []
    for i, node in enumerate(g.nodes):
        if len(adj[i]) >= 2:
            values.append(clustering_coefficient(g, node))
    return float(np.mean(values)) if values else 0.0


# --- disparity filter --------------------------------------------------------


def disparity_significance(p: float, k: int) -> float:
    """Closed form of 1 - (k-1) * integral_0^p (1-x)^(k-2) dx = (1-p)^(k-1)."""
    if not (0.0 <= p <= 1.0):
        raise GraphError(f"normalized weight {p} outside [0, 1]")
    if k < 2:
        raise GraphError("significance needs degree >= 2")
    return math.exp((k - 1) * math.log1p(-p)) if p < 1.0 else 0.0


@dataclass
class BackboneGraph:
    """Surviving-edge subgraph with per-edge significance levels."""

    base: WeightedGraph
    alpha_s: float
    edge_significance: dict[tuple[int, int], float]

    @property
    def nodes(self) -> list[str]:
        return self.base.nodes

    @property
    def edges(self) -> dict[tuple[int, int], float]:
        return self.base.edges


def disparity_backbone(g: WeightedGraph, alpha_s: float = DEFAULT_ALPHA_S) -> BackboneGraph:
    """Keep edges significant from at least one endpoint at level alpha_s.

    For an endpoint of degree k >= 2, the edge's normalized weight p gets
    significance (1 - p)^(k - 1); smaller means the edge carries more of the
    node's strength than a uniform split would. Degree-1 nodes keep their
    only edge. The node set is preserved; isolated nodes are allowed.
    """
    if not (0.0 < alpha_s < 1.0):
        raise GraphError(f"alpha_s must be in (0, 1), got {alpha_s}")
    adj = g.adjacency()
    degree = [len(a) for a in adj]
    strength = [sum(a.values()) for a in adj]

    significance: dict[tuple[int, int], float] = {}
    surviving: dict[tuple[int, int], float] = {}
    for (i, j), w in g.edges.items():
        alphas = []
        keep = False
        for end, other in ((i, j), (j, i)):
            k = degree[end]
            if k == 1:
                keep = True
                continue
            a_e = disparity_significance(w / strength[end], k)
            alphas.append(a_e)
            if a_e < alpha_s:
                keep = True
        significance[(i, j)] = min(alphas) if alphas else 0.0
        if keep:
            surviving[(i, j)] = w
    base = WeightedGraph(nodes=list(g.nodes), edges=surviving)
    return BackboneGraph(base=base, alpha_s=alpha_s, edge_significance=significance)


# --- modularity and community detection --------------------------------------


def _as_graph(g) -> WeightedGraph:
    return getattr(g, "base", g)


def modularity(g, assignment: dict[str, int]) -> float:
    """Weighted modularity over ordered pairs with a strength null model.

    Q = (1/2m) * sum_{i,j} [w_ij - A_i A_j / 2m] delta(c_i, c_j) with
    A_i the node strength and 2m the total ordered-pair weight; self-pairs
    contribute only the null-model term because w_ii = 0.
    """
    g = _as_graph(g)
    missing = [node for node in g.nodes if node not in assignment]
    if missing:
        raise GraphError(f"assignment missing nodes: {missing[:5]}")
    if not g.edges:
        raise GraphError("modularity of an empty graph is undefined")
    m2 = 2.0 * sum(g.edges.values())
    comm = [assignment[node] for node in g.nodes]
    internal: dict[int, float] = {}
    tot: dict[int, float] = {}
    adj = g.adjacency()
    for i in range(g.n):
        tot[comm[i]] = tot.get(comm[i], 0.0) + sum(adj[i].values())
    for (i, j), w in g.edges.items():
        if comm[i] == comm[j]:
            internal[comm[i]] = internal.get(comm[i], 0.0) + 2.0 * w
    q = 0.0
    for c in tot:
        q += internal.get(c, 0.0) / m2 - (tot[c] / m2) ** 2
    return q


@dataclass
class CommunityPartition:
    """Node-to-community assignment with its verified modularity."""

    assignment: dict[str, int]
    q: float
    seed: int
    n_communities: int = field(init=False)

    def __post_init__(self):
        self.n_communities = len(set(self.assignment.values()))

    def members(self, community_id: int) -> frozenset[str]:
        return frozenset(n for n, c in self.assignment.items() if c == community_id)

    def community_ids(self) -> list[int]:
        return sorted(set(self.assignment.values()))


def _local_moving(adj, strength, m2, comm, order, rng):
    """One level of strictly-positive-gain local moves; mutates comm in place."""
    tot = {}
    for node, c in enumerate(comm):
        tot[c] = tot.get(c, 0.0) + strength[node]
    moved_any = False
    while True:
        moved = False
        rng.shuffle(order)
        for i in order:
            a_i = strength[i]
            c_old = comm[i]
            # weight from i to each neighboring community, excluding i itself
            k_to: dict[int, float] = {}
            for j, w in adj[i].items():
                if j != i:
                    k_to[comm[j]] = k_to.get(comm[j], 0.0) + w
            tot[c_old] -= a_i
            base_in = k_to.get(c_old, 0.0)
            # relative gain of community c over staying in c_old; candidates
            # scanned in ascending id with strict improvement required, so an
            # exact tie resolves to the lowest community id
            best_c, best_gain = c_old, 0.0
            for c in sorted(k_to):
                gain = 2.0 * (k_to[c] - base_in) / m2 - 2.0 * a_i * (
                    tot.get(c, 0.0) - tot[c_old]
                ) / m2**2
                if gain > best_gain + 1e-15:
                    best_c, best_gain = c, gain
            assert best_gain >= 0.0, "accepted move must not decrease modularity"
            comm[i] = best_c
            tot[best_c] = tot.get(best_c, 0.0) + a_i
            if best_c != c_old:
                moved = True
                moved_any = True
        if not moved:
            break
    return moved_any


def _aggregate(adj, self_loop, comm):
    """Collapse communities into supernodes, preserving ordered-pair weights."""
    ids = sorted(set(comm))
    remap = {c: k for k, c in enumerate(ids)}
    n_new = len(ids)
    new_adj: list[dict[int, float]] = [dict() for _ in range(n_new)]
    new_self = [0.0] * n_new
    for i, c in enumerate(comm):
        ci = remap[c]
        new_self[ci] += self_loop[i]
        for j, w in adj[i].items():
            cj = remap[comm[j]]
            if ci == cj:
                # each internal undirected edge visited from both ends: adds 2w total
                new_self[ci] += w
            else:
                new_adj[ci][cj] = new_adj[ci].get(cj, 0.0) + w
    return new_adj, new_self, remap


def _merge_pass(base_adj, strength0, m2, node_comm):
    """Greedily merge whole community pairs while any merge raises Q."""
    while True:
        tots: dict[int, float] = {}
        for i, c in enumerate(node_comm):
            tots[c] = tots.get(c, 0.0) + strength0[i]
        between: dict[tuple[int, int], float] = {}
        for i in range(len(base_adj)):
            ci = node_comm[i]
            for j, w in base_adj[i].items():
                if j > i and node_comm[j] != ci:
                    key = (min(ci, node_comm[j]), max(ci, node_comm[j]))
                    between[key] = between.get(key, 0.0) + w
        best, best_gain = None, 1e-15
        for (c1, c2), w12 in sorted(between.items()):
            gain = 2.0 * w12 / m2 - 2.0 * tots[c1] * tots[c2] / m2**2
            if gain > best_gain:
                best, best_gain = (c1, c2), gain
        if best is None:
            return
        c1, c2 = best
        for i, c in enumerate(node_comm):
            if c == c2:
                node_comm[i] = c1


def _louvain_once(
    graph: WeightedGraph, rng: random.Random, start: list[int] | None = None
) -> dict[str, int]:
    """One full run from `start` (default singletons): local moving +
    aggregation levels, then a community-merge pass and a level-0 refinement
    sweep of single original nodes. Every phase is monotone in Q."""
    base_adj = graph.adjacency()
    m2 = 2.0 * sum(graph.edges.values())

    adj = base_adj
    self_loop = [0.0] * graph.n
    node_comm = list(range(graph.n))
    comm = list(start) if start is not None else list(range(graph.n))
    while True:
        order = list(range(len(adj)))
        st = [self_loop[i] + sum(adj[i].values()) for i in range(len(adj))]
        moved = _local_moving(adj, st, m2, comm, order, rng)
        if not moved:
            break
        adj, self_loop, remap = _aggregate(adj, self_loop, comm)
        node_comm = [remap[comm[c]] for c in node_comm]
        comm = list(range(len(adj)))
    if start is not None and len(set(node_comm)) == graph.n:
        # no aggregation happened; keep the provided start refined in place
        node_comm = list(comm)

    strength0 = [sum(a.values()) for a in base_adj]
    _merge_pass(base_adj, strength0, m2, node_comm)
    order0 = list(range(graph.n))
    _local_moving(base_adj, strength0, m2, node_comm, order0, rng)
    return {graph.nodes[i]: node_comm[i] for i in range(graph.n)}


def louvain(g, seed: int = DEFAULT_SEED, restarts: int = 8) -> CommunityPartition:
    """Two-phase weighted community detection, deterministic for a given seed.

    Sweep order is a seeded shuffle of the node order; only strictly positive
    modularity gains are accepted, with ties broken toward the lowest
    community id; levels aggregate until no move improves. The procedure is
    restarted `restarts` times from the same seeded stream, alternating
    singleton and random coarse initial partitions, each run iterated from
    its own result until Q stalls; the highest-Q partition wins. This guards
    against the single-node-move local optima the plain sweep falls into on
    small graphs. The returned q is recomputed from the original graph and
    assignment, not carried over from the internal bookkeeping.
    """
    graph = _as_graph(g)
    if not graph.edges:
        raise GraphError("community detection needs at least one edge")
    if restarts < 1:
        raise GraphError("restarts must be >= 1")
    rng = random.Random(seed)

    best_assignment = None
    best_q = -math.inf
    for r in range(restarts):
        if r % 2 == 0:
            assignment_raw = _louvain_once(graph, rng)
        else:
            # diversified start: a seeded random coarse partition escapes
            # basins that singleton initialization can never leave
            k = rng.randint(2, max(2, graph.n // 2))
            start = [rng.randrange(k) for _ in range(graph.n)]
            assignment_raw = _louvain_once(graph, rng, start=start)
        q = modularity(graph, assignment_raw)
        # re-run the whole procedure seeded by its own result until Q stalls
        while True:
            start = [assignment_raw[node] for node in graph.nodes]
            candidate = _louvain_once(graph, rng, start=start)
            q_new = modularity(graph, candidate)
            if q_new <= q + 1e-12:
                break
            assignment_raw, q = candidate, q_new
        if q > best_q:
            best_q = q
            best_assignment = assignment_raw

    assignment = _canonicalize(best_assignment)
    q = modularity(graph, assignment)
    return CommunityPartition(assignment=assignment, q=q, seed=seed)


def _canonicalize(assignment: dict[str, int]) -> dict[str, int]:
    """Relabel community ids by descending size, ties by smallest member."""
    groups: dict[int, list[str]] = {}
    for node, c in assignment.items():
        groups.setdefault(c, []).append(node)
    ordered = sorted(groups.values(), key=lambda ms: (-len(ms), min(ms)))
    relabel = {}
    for new_id, members in enumerate(ordered):
        for node in members:
            relabel[node] = new_id
    return relabel


# --- external-internal indices ------------------------------------------------


@dataclass(frozen=True)
class EiIndices:
    degree_index: float
    weight_index: float


def ei_indices(g, assignment: dict[str, int]) -> EiIndices:
    """Signed internal-dominance balance for degree and weight.

    index = -(external - internal) / (external + internal), counting each
    edge's two endpoints for the degree version and its weight for the
    weight version; +1 means all edges internal, -1 all external.
    """
    g = _as_graph(g)
    missing = [node for node in g.nodes if node not in assignment]
    if missing:
        raise GraphError(f"assignment missing nodes: {missing[:5]}")
    if not g.edges:
        raise GraphError("E-I indices need at least one edge")
    ek = ik = 0.0
    ew = iw = 0.0
    for (i, j), w in g.edges.items():
        internal = assignment[g.nodes[i]] == assignment[g.nodes[j]]
        if internal:
            ik += 2.0
            iw += w
        else:
            ek += 2.0
            ew += w
    return EiIndices(
        degree_index=-(ek - ik) / (ek + ik),
        weight_index=-(ew - iw) / (ew + iw),
    )


# --- union / community comparison ----------------------------------------------


@dataclass
class SimilarityMatrix:
    row_names: list[str]
    col_ids: list[int]
    values: np.ndarray
    row_counts: list[int]
    col_counts: list[int]

    def to_csv(self) -> str:
        header = ["union", "num"] + [f"community_{c}" for c in self.col_ids]
        lines = [",".join(header)]
        lines.append(
            ",".join(["num", ""] + [str(c) for c in self.col_counts])
        )
        for r, name in enumerate(self.row_names):
            cells = [name, str(self.row_counts[r])]
            cells += [f"{self.values[r, c]:.4f}" for c in range(len(self.col_ids))]
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"


def jaccard(a: frozenset, b: frozenset) -> float:
    if not a and not b:
        return 0.0
    return len(a & b) / len(a | b)


def jaccard_matrix(unions, partition: CommunityPartition) -> SimilarityMatrix:
    """Jaccard similarity of every union (plus 'Others') against every community.

    Union rosters are restricted to the partitioned node set so the
    comparison is between subsets of the same universe.
    """
    universe = frozenset(partition.assignment)
    rows: list[tuple[str, frozenset[str]]] = []
    in_any: set[str] = set()
    for name in unions.names():
        members = unions.members(name) & universe
        rows.append((name, frozenset(members)))
        in_any |= members
    rows.append(("Others", frozenset(universe - in_any)))

    col_ids = partition.community_ids()
    values = np.zeros((len(rows), len(col_ids)))
    col_sets = [partition.members(c) for c in col_ids]
    for r, (_, members) in enumerate(rows):
        for c, comm_members in enumerate(col_sets):
            values[r, c] = jaccard(members, comm_members)
    return SimilarityMatrix(
        row_names=[name for name, _ in rows],
        col_ids=col_ids,
        values=values,
        row_counts=[len(members) for _, members in rows],
        col_counts=[len(s) for s in col_sets],
    )


# --- serialization --------------------------------------------------------------


def backbone_to_csv(g: WeightedGraph, bb: BackboneGraph) -> str:
    """All input edges with weight, significance, and survival flag."""
    lines = ["iso_a,iso_b,weight,alpha_ij,survived"]
    for (i, j) in sorted(g.edges):
        w = g.edges[(i, j)]
        alpha_ij = bb.edge_significance.get((i, j), float("nan"))
        survived = (i, j) in bb.base.edges
        lines.append(
            f"{g.nodes[i]},{g.nodes[j]},{float(w)!r},{float(alpha_ij)!r},{str(survived).lower()}"
        )
    return "\n".join(lines) + "\n"


def partition_to_csv(partition: CommunityPartition) -> str:
    lines = ["iso,community_id"]
    for node in sorted(partition.assignment):
        lines.append(f"{node},{partition.assignment[node]}")
    return "\n".join(lines) + "\n"


def partition_summary_json(
    partition: CommunityPartition,
    alpha_s: float,
    mean_clust: float,
    ei: EiIndices,
    ei_full: EiIndices | None = None,
) -> str:
    """Network-stage summary; `ei` is computed on the backbone, and the
    full-graph indices are attached under explicit `_full` labels when given."""
    doc = {
        "q": partition.q,
        "n_communities": partition.n_communities,
        "alpha_s": alpha_s,
        "seed": partition.seed,
        "mean_clustering": mean_clust,
        "ei_degree": ei.degree_index,
        "ei_weight": ei.weight_index,
    }
    if ei_full is not None:
        doc["ei_degree_full"] = ei_full.degree_index
        doc["ei_weight_full"] = ei_full.weight_index
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"
