"""Relation Frequency - Inverse Entity Frequency node features.

A node is treated as a bag of incident relation types.  Counts (RF) are
local to a subgraph; entity frequencies (EF) are counted once over the
training corpus and reused unchanged for every split.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .graph import AugmentedGraph, RelationVocab, augment
from .tensor import DimensionError, Tensor, matmul


class RFIEFError(ValueError):
    pass


def relation_frequency(graph: AugmentedGraph) -> np.ndarray:
    """Integer ``num_nodes x num_relations`` matrix of incident-edge counts.

    An edge touches both endpoints; a self-loop touches its node once.
    """
    n, R = graph.num_nodes, graph.relation_count
    rf = np.zeros((n, R), dtype=np.int64)
    np.add.at(rf, (graph.heads, graph.rels), 1)
    loops = graph.heads == graph.tails
    np.add.at(rf, (graph.tails[~loops], graph.rels[~loops]), 1)
    return rf


@dataclass
class EfTable:
    ef: np.ndarray  # indexed by augmented relation id
    total_nodes: int
    relation_names: list

    def to_json(self) -> dict:
        return {"total_nodes": int(self.total_nodes),
                "ef": {name: int(c) for name, c in zip(self.relation_names, self.ef)}}

    @classmethod
    def from_json(cls, obj: dict, vocab: RelationVocab) -> "EfTable":
        ef = np.zeros(vocab.size, dtype=np.int64)
        for name, count in obj["ef"].items():
            ef[vocab.id(name)] = int(count)
        return cls(ef, int(obj["total_nodes"]), list(vocab.names))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path, vocab: RelationVocab) -> "EfTable":
        return cls.from_json(json.loads(Path(path).read_text()), vocab)

    def __add__(self, other: "EfTable") -> "EfTable":
        return EfTable(self.ef + other.ef, self.total_nodes + other.total_nodes, self.relation_names)


def entity_frequency(instances: Iterable, vocab: RelationVocab, inverse_edges: bool = True) -> EfTable:
    """Per relation, the number of corpus nodes with at least one incident edge of it."""
    ef = np.zeros(vocab.size, dtype=np.int64)
    total = 0
    for item in getattr(instances, "instances", instances):
        graph = item if isinstance(item, AugmentedGraph) else augment(item, vocab, inverse_edges)
        ef += (relation_frequency(graph) > 0).sum(axis=0)
        total += graph.num_nodes
    if total == 0:
        raise RFIEFError("entity_frequency needs a nonempty training set")
    return EfTable(ef, total, list(vocab.names))


def inverse_entity_frequency(table: EfTable, num_nodes: int | None = None) -> np.ndarray:
    """ln(N / (1 + EF)) with N the corpus node total, or ``num_nodes`` when given."""
    numerator = table.total_nodes if num_nodes is None else num_nodes
    if numerator < 1:
        raise RFIEFError("IEF numerator must be >= 1")
    return np.log(numerator / (1.0 + table.ef.astype(np.float64)))


def rfief_matrix(rf: np.ndarray, ief: np.ndarray) -> np.ndarray:
    return rf * ief[None, :]


def rfief_embed(rf: np.ndarray, ief: np.ndarray, R: Tensor, W_h: Tensor) -> Tensor:
    """H = RF diag(IEF) R W_h; only R and W_h carry gradients."""
    rf = np.asarray(rf)
    if rf.ndim != 2 or rf.shape[1] != len(ief) or R.shape[0] != len(ief) or R.shape[1] != W_h.shape[0]:
        raise DimensionError(
            f"rfief_embed shapes: rf {rf.shape}, ief {np.shape(ief)}, R {R.shape}, W_h {W_h.shape}")
    F = Tensor(rfief_matrix(rf, np.asarray(ief)).astype(R.dtype))
    return matmul(matmul(F, R), W_h)


@dataclass
class RelationWeights:
    weights: dict  # relation id -> share of the positive mass
    negative: dict  # relation id -> raw (negative) F entry


def inspect_weights(rf: np.ndarray, ief: np.ndarray, v: int) -> RelationWeights:
    if not 0 <= v < rf.shape[0]:
        raise RFIEFError(f"node {v} out of range")
    row = rf[v] * ief
    pos = {int(r): float(w) for r, w in enumerate(row) if w > 0}
    neg = {int(r): float(w) for r, w in enumerate(row) if w < 0}
    total = math.fsum(pos.values())
    if total > 0:
        pos = {r: w / total for r, w in pos.items()}
    return RelationWeights(pos, neg)
