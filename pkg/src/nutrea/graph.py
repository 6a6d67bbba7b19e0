"""KG subgraphs, edge augmentation and depth-K subtree extraction."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import shortest_path

SELF_LOOP_NAME = "self_loop"
INVERSE_PREFIX = "inv:"


class GraphValidationError(ValueError):
    pass


class RelationVocab:
    """Base relation names plus their inverses and one self-loop relation.

    Ids ``0..n-1`` are base relations, ``n..2n-1`` their inverses and ``2n``
    is the self loop.
    """

    def __init__(self, base_names: Sequence[str]):
        names = list(base_names)
        if len(set(names)) != len(names):
            raise GraphValidationError("duplicate relation names")
        for name in names:
            if name.startswith(INVERSE_PREFIX) or name == SELF_LOOP_NAME:
                raise GraphValidationError(f"reserved relation name {name!r}")
        self.base_names = names
        self.num_base = len(names)
        self.names = names + [INVERSE_PREFIX + n for n in names] + [SELF_LOOP_NAME]
        self._ids = {n: i for i, n in enumerate(self.names)}

    @property
    def size(self) -> int:
        return len(self.names)

    @property
    def self_loop(self) -> int:
        return 2 * self.num_base

    def inverse(self, rel: int) -> int:
        if rel == self.self_loop:
            return rel
        return (rel + self.num_base) % (2 * self.num_base)

    def id(self, name: str) -> int:
        try:
            return self._ids[name]
        except KeyError:
            raise GraphValidationError(f"unknown relation {name!r}") from None

    def name(self, rel: int) -> str:
        return self.names[rel]

    def __eq__(self, other) -> bool:
        return isinstance(other, RelationVocab) and self.base_names == other.base_names

    def __len__(self) -> int:
        return self.size


@dataclass(frozen=True)
class SubgraphInstance:
    id: str
    question_tokens: tuple
    triplets: tuple  # ((head, base relation id, tail), ...)
    num_nodes: int
    seeds: frozenset
    answers: frozenset = frozenset()

    def validate(self) -> "SubgraphInstance":
        if self.num_nodes < 1:
            raise GraphValidationError(f"instance {self.id}: num_nodes must be >= 1")
        if not self.seeds:
            raise GraphValidationError(f"instance {self.id}: no seed nodes")
        for h, _, t in self.triplets:
            if not (0 <= h < self.num_nodes and 0 <= t < self.num_nodes):
                raise GraphValidationError(
                    f"instance {self.id}: triplet node id out of range ({h}, {t}) "
                    f"for num_nodes={self.num_nodes}")
        for v in self.seeds | self.answers:
            if not 0 <= v < self.num_nodes:
                raise GraphValidationError(
                    f"instance {self.id}: node id {v} out of range for num_nodes={self.num_nodes}")
        if len(set(self.triplets)) != len(self.triplets):
            raise GraphValidationError(f"instance {self.id}: duplicate triplets")
        return self


class AugmentedGraph:
    """A subgraph with inverse edges and self-loops added.

    Edge order: base triplets, then their inverses, then one self-loop per
    node.  Arrays ``heads``, ``rels``, ``tails`` are aligned by edge index.
    """

    def __init__(self, base: SubgraphInstance, vocab: RelationVocab, inverse_edges: bool = True):
        base.validate()
        for _, r, _ in base.triplets:
            if not 0 <= r < vocab.num_base:
                raise GraphValidationError(f"instance {base.id}: relation id {r} not a base relation")
        self.base = base
        self.vocab = vocab
        self.inverse_edges = inverse_edges
        n = base.num_nodes
        tri = np.array(base.triplets, dtype=np.int64).reshape(-1, 3)
        heads = [tri[:, 0]]
        rels = [tri[:, 1]]
        tails = [tri[:, 2]]
        if inverse_edges:
            heads.append(tri[:, 2])
            rels.append(tri[:, 1] + vocab.num_base)
            tails.append(tri[:, 0])
        nodes = np.arange(n, dtype=np.int64)
        heads.append(nodes)
        rels.append(np.full(n, vocab.self_loop, dtype=np.int64))
        tails.append(nodes)
        self.heads = np.concatenate(heads)
        self.rels = np.concatenate(rels)
        self.tails = np.concatenate(tails)
        self.relation_count = vocab.size
        order = np.argsort(self.tails, kind="stable")
        bounds = np.searchsorted(self.tails[order], np.arange(n + 1))
        self.in_edges = [order[bounds[v]:bounds[v + 1]] for v in range(n)]
        self._subtree_cache: dict = {}
        self._dist: Optional[np.ndarray] = None

    @property
    def num_nodes(self) -> int:
        return self.base.num_nodes

    @property
    def num_edges(self) -> int:
        return len(self.heads)

    def edges(self) -> list[tuple[int, int, int]]:
        return list(zip(self.heads.tolist(), self.rels.tolist(), self.tails.tolist()))

    def distances(self) -> np.ndarray:
        """All-pairs hop distance on the undirected view (inf when unreachable)."""
        if self._dist is None:
            n = self.num_nodes
            adj = csr_matrix((np.ones(self.num_edges), (self.heads, self.tails)), shape=(n, n))
            self._dist = shortest_path(adj, directed=False, unweighted=True)
        return self._dist

    def subtree_mask(self, K: int) -> np.ndarray:
        """Boolean ``num_nodes x num_edges`` matrix: edge e lies in the depth-K subtree of v."""
        if K < 0:
            raise GraphValidationError("subtree depth must be >= 0")
        near = self.distances() <= K
        return near[:, self.heads] & near[:, self.tails]

    def subtree_edges(self, v: int, K: int) -> set[int]:
        if not 0 <= v < self.num_nodes:
            raise GraphValidationError(f"node {v} out of range for num_nodes={self.num_nodes}")
        return set(self.all_subtree_edges(K)[v].tolist())

    def subtree_relations(self, K: int) -> tuple[np.ndarray, np.ndarray]:
        """(node, relation) pairs: relation occurs on some edge of the node's E_v."""
        key = ("rel", K)
        if key not in self._subtree_cache:
            mask = self.subtree_mask(K)
            onehot = np.zeros((self.num_edges, self.relation_count), dtype=np.int64)
            onehot[np.arange(self.num_edges), self.rels] = 1
            self._subtree_cache[key] = np.nonzero((mask.astype(np.int64) @ onehot) > 0)
        return self._subtree_cache[key]

    def all_subtree_edges(self, K: int) -> list[np.ndarray]:
        if K not in self._subtree_cache:
            mask = self.subtree_mask(K)
            self._subtree_cache[K] = [np.flatnonzero(row) for row in mask]
        return self._subtree_cache[K]


def augment(instance: SubgraphInstance, vocab: RelationVocab, inverse_edges: bool = True) -> AugmentedGraph:
    return AugmentedGraph(instance, vocab, inverse_edges=inverse_edges)


def subtree_edges(graph: AugmentedGraph, v: int, K: int) -> set[int]:
    return graph.subtree_edges(v, K)


def all_subtree_edges(graph: AugmentedGraph, K: int) -> list[np.ndarray]:
    return graph.all_subtree_edges(K)


@dataclass
class GraphBatch:
    """Disjoint union of augmented graphs, flattened for batched message passing.

    Node ids are shifted by ``node_offset[g]``; nodes of graph ``g`` are the
    contiguous block ``node_offset[g]:node_offset[g+1]``.
    """

    graphs: list
    num_relations: int
    node_offset: np.ndarray
    node_graph: np.ndarray
    heads: np.ndarray
    rels: np.ndarray
    tails: np.ndarray
    edge_graph: np.ndarray
    init_scores: np.ndarray
    _pairs: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_graphs(cls, graphs: Iterable[AugmentedGraph]) -> "GraphBatch":
        graphs = list(graphs)
        if not graphs:
            raise GraphValidationError("empty batch")
        sizes = np.array([g.num_nodes for g in graphs], dtype=np.int64)
        offset = np.concatenate([[0], np.cumsum(sizes)])
        node_graph = np.repeat(np.arange(len(graphs)), sizes)
        heads, rels, tails, eg = [], [], [], []
        init = np.zeros(offset[-1])
        for gi, g in enumerate(graphs):
            heads.append(g.heads + offset[gi])
            tails.append(g.tails + offset[gi])
            rels.append(g.rels)
            eg.append(np.full(g.num_edges, gi, dtype=np.int64))
            # seeds start at score 1 each, unnormalised
            init[[offset[gi] + s for s in sorted(g.base.seeds)]] = 1.0
        return cls(graphs=graphs, num_relations=graphs[0].relation_count, node_offset=offset,
                   node_graph=node_graph, heads=np.concatenate(heads), rels=np.concatenate(rels),
                   tails=np.concatenate(tails), edge_graph=np.concatenate(eg), init_scores=init)

    @property
    def num_graphs(self) -> int:
        return len(self.graphs)

    @property
    def num_nodes(self) -> int:
        return int(self.node_offset[-1])

    @property
    def edge_rel_slot(self) -> np.ndarray:
        """Row of each edge in a per-(graph, relation) message table."""
        return self.edge_graph * self.num_relations + self.rels

    def subtree_relation_pairs(self, K: int) -> tuple[np.ndarray, np.ndarray]:
        """(node, graph*R + relation) pairs for every relation present in a node's E_v.

        Backup messages depend on an edge only through its relation, so pooling
        over distinct relations of E_v equals pooling over E_v itself.
        """
        if K not in self._pairs:
            nodes, slots = [], []
            R = self.num_relations
            for gi, g in enumerate(self.graphs):
                v, r = g.subtree_relations(K)
                nodes.append(v + self.node_offset[gi])
                slots.append(gi * R + r)
            self._pairs[K] = (np.concatenate(nodes), np.concatenate(slots))
        return self._pairs[K]
