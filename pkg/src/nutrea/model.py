"""NuTrea layers (Expansion, Backup, Node Ranking) and stacked inference.

Everything runs on a :class:`ModelBatch`, a disjoint union of instance
subgraphs; scores are normalised per graph, so a batch of one is exactly
the single-instance model.
"""
from __future__ import annotations

import base64
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .data import TokenVocab
from .encoder import (EncodedQuestions, IGParams, InstructionSet, encode_questions,
                      make_instruction_set, relation_token_matrix)
from .graph import AugmentedGraph, GraphBatch, RelationVocab, SubgraphInstance, augment
from .rfief import EfTable, inverse_entity_frequency, relation_frequency
from .tensor import DimensionError, Tensor

CHECKPOINT_FORMAT = "nutrea-ckpt-v1"


class ModelError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 32
    layers: int = 2
    subtree_depth: int = 1
    num_expansion: int = 3
    num_backup: int = 3
    lam: float = 1.0
    use_position_embeddings: bool = False
    use_backup: bool = True
    use_rfief: bool = True
    inference_iterations: int = 2
    inverse_edges: bool = True
    ief_numerator: str = "corpus"
    question_positions: int = 16  # learned position rows added to token vectors; 0 disables

    def validate(self) -> "ModelConfig":
        if self.layers < 1 or self.subtree_depth < 0 or self.lam < 0:
            raise ModelError("need layers >= 1, subtree_depth >= 0, lam >= 0")
        if self.dim < 1 or self.num_expansion < 1 or self.num_backup < 1:
            raise ModelError("dim, num_expansion and num_backup must be >= 1")
        if self.inference_iterations < 1:
            raise ModelError("inference_iterations must be >= 1")
        if self.question_positions < 0:
            raise ModelError("question_positions must be >= 0")
        if self.ief_numerator not in ("corpus", "instance"):
            raise ModelError("ief_numerator must be 'corpus' or 'instance'")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ModelError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d).validate()


# ---------------------------------------------------------------- parameters

@dataclass
class MLP:
    W1: Tensor
    b1: Tensor
    W2: Tensor
    b2: Tensor

    def __call__(self, x: Tensor) -> Tensor:
        hidden = T.relu(T.matmul(x, self.W1) + self.b1)
        return T.matmul(hidden, self.W2) + self.b2


@dataclass
class LayerParams:
    W_f: Tensor
    exp_mlp: MLP
    W_c: Tensor
    bak_mlp: MLP
    W_e: Tensor  # D x 1
    W_b: Tensor  # D x 1
    pos_emb: Optional[Tensor] = None  # |R| x D


def parameter_shapes(cfg: ModelConfig, num_tokens: int, num_relations: int) -> dict:
    """Name -> shape for every trainable tensor, in initialisation order."""
    D, N, M = cfg.dim, cfg.num_expansion, cfg.num_backup
    shapes = {"token_emb": (num_tokens, D), "W_h": (D, D)}
    if cfg.question_positions:
        shapes["token_pos"] = (cfg.question_positions, D)
    for ig, count in (("ig_exp", N), ("ig_bak", M)):
        for i in range(count):
            shapes[f"{ig}.W.{i}"] = (D, 4 * D)
        shapes[f"{ig}.W_a"] = (D, D)
        shapes[f"{ig}.W_update"] = (D, D)
    for layer in range(cfg.layers):
        p = f"layer{layer}"
        shapes[f"{p}.W_f"] = (D, D)
        if cfg.use_position_embeddings:
            shapes[f"{p}.pos_emb"] = (num_relations, D)
        for mlp, width in (("exp_mlp", (N + 1) * D), ("bak_mlp", (M + 1) * D)):
            shapes[f"{p}.{mlp}.W1"] = (width, D)
            shapes[f"{p}.{mlp}.b1"] = (D,)
            shapes[f"{p}.{mlp}.W2"] = (D, D)
            shapes[f"{p}.{mlp}.b2"] = (D,)
        shapes[f"{p}.W_c"] = (D, D)
        shapes[f"{p}.W_e"] = (D, 1)
        shapes[f"{p}.W_b"] = (D, 1)
    return shapes


def init_params(cfg: ModelConfig, num_tokens: int, num_relations: int, seed: int,
                dtype=np.float32) -> dict:
    rng = np.random.default_rng(seed)
    bound = 1.0 / np.sqrt(cfg.dim)
    return {name: Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)
            for name, shape in parameter_shapes(cfg, num_tokens, num_relations).items()}


# ---------------------------------------------------------------- batches

@dataclass
class PreparedInstance:
    instance: SubgraphInstance
    graph: AugmentedGraph
    features: np.ndarray  # num_nodes x |R| rows of F (or normalised RF)


@dataclass
class ModelBatch:
    graph: GraphBatch
    features: np.ndarray
    questions: list
    answers: list
    ids: list

    @property
    def num_graphs(self) -> int:
        return self.graph.num_graphs


@dataclass
class LayerState:
    s: Tensor
    h: Tensor
    f: Optional[Tensor] = None


@dataclass
class ForwardTrace:
    passes: list = field(default_factory=list)  # per inference pass, list of LayerState
    instructions: list = field(default_factory=list)


# ---------------------------------------------------------------- layer steps

def _instruction_block(vectors: Sequence[Tensor]) -> Tensor:
    """Stack k instructions (each B x D) into a B x 1 x k x D tensor."""
    B, D = vectors[0].shape
    return T.reshape(T.concat(list(vectors), axis=1), (B, 1, len(vectors), D))


def relation_messages(proj: Tensor, instructions: Sequence[Tensor]) -> Tensor:
    """ReLU(proj_r * q^(i)) for every (graph, relation), as a (B*|R|) x (k*D) table."""
    R, D = proj.shape
    Q = _instruction_block(instructions)
    B, k = Q.shape[0], Q.shape[2]
    prod = T.reshape(proj, (1, R, 1, D)) * Q
    return T.reshape(T.relu(prod), (B * R, k * D))


def expansion_step(batch: ModelBatch, s: Tensor, h: Tensor, q_exp: Sequence[Tensor], R: Tensor,
                   lp: LayerParams, skip_zero_scores: bool = True) -> Tensor:
    """Score-weighted relation messages summed into each tail, then the aggregator MLP."""
    D = R.shape[1]
    if any(q.shape[1] != D for q in q_exp) or h.shape[1] != D:
        raise DimensionError("instruction / embedding dimension mismatch")
    g = batch.graph
    proj = T.matmul(R, lp.W_f)
    if lp.pos_emb is not None:
        proj = proj + lp.pos_emb
    table = relation_messages(proj, q_exp)
    edges = np.arange(len(g.heads))
    if skip_zero_scores:
        edges = edges[s.data[g.heads] != 0]
    heads = g.heads[edges]
    msgs = T.take_rows(table, g.edge_rel_slot[edges])
    weights = T.take_rows(T.reshape(s, (-1, 1)), heads)
    f_tilde = T.index_add(msgs * weights, g.tails[edges], g.num_nodes)
    return lp.exp_mlp(T.concat([h, f_tilde], axis=1))


def backup_step(batch: ModelBatch, f: Tensor, q_bak: Sequence[Tensor], R: Tensor,
                lp: LayerParams, K: int) -> Tensor:
    """Max-pool question-gated relation messages over each node's depth-K subtree."""
    g = batch.graph
    table = relation_messages(T.matmul(R, lp.W_c), q_bak)
    nodes, slots = g.subtree_relation_pairs(K)
    pooled = T.segment_max(T.take_rows(table, slots), nodes, g.num_nodes)
    return lp.bak_mlp(T.concat([f, pooled], axis=1))


def node_ranking(batch: ModelBatch, f: Tensor, h: Optional[Tensor], lam: float,
                 lp: LayerParams) -> Tensor:
    logits = T.matmul(f, lp.W_e)
    if h is not None:
        logits = logits + T.matmul(h, lp.W_b) * lam
    g = batch.graph
    return T.segment_softmax(T.reshape(logits, (-1,)), g.node_graph, g.num_graphs)


def nutrea_layer(batch: ModelBatch, state: LayerState, instructions: InstructionSet, R: Tensor,
                 lp: LayerParams, cfg: ModelConfig) -> LayerState:
    f = expansion_step(batch, state.s, state.h, instructions.expansion, R, lp)
    if cfg.use_backup:
        h = backup_step(batch, f, instructions.backup, R, lp, cfg.subtree_depth)
        s = node_ranking(batch, f, h, cfg.lam, lp)
    else:
        h = f
        s = node_ranking(batch, f, None, cfg.lam, lp)
    return LayerState(s=s, h=h, f=f)


# ---------------------------------------------------------------- model

class NuTrea:
    def __init__(self, cfg: ModelConfig, relations: RelationVocab, tokens: TokenVocab,
                 ef_table: Optional[EfTable] = None, params: Optional[dict] = None,
                 seed: int = 0, dtype=np.float32):
        self.cfg = cfg.validate()
        self.relations = relations
        self.tokens = tokens
        if cfg.use_rfief and ef_table is None:
            raise ModelError("an EF table is required when use_rfief is on")
        self.ef_table = ef_table
        self.params = params if params is not None else init_params(
            cfg, len(tokens), relations.size, seed, dtype)
        self._rel_tokens = relation_token_matrix(relations, tokens)
        self._ief = None if ef_table is None else inverse_entity_frequency(ef_table)

    @property
    def dtype(self):
        return self.params["token_emb"].dtype

    def astype(self, dtype) -> "NuTrea":
        params = {k: Tensor(v.data.astype(dtype), requires_grad=True) for k, v in self.params.items()}
        return NuTrea(self.cfg, self.relations, self.tokens, self.ef_table, params)

    def with_config(self, **changes) -> "NuTrea":
        from dataclasses import replace
        return NuTrea(replace(self.cfg, **changes), self.relations, self.tokens, self.ef_table,
                      self.params)

    # -- parameter views
    def ig_params(self, which: str) -> IGParams:
        count = self.cfg.num_expansion if which == "ig_exp" else self.cfg.num_backup
        p = self.params
        return IGParams([p[f"{which}.W.{i}"] for i in range(count)], p[f"{which}.W_a"],
                        p[f"{which}.W_update"])

    def layer_params(self, layer: int) -> LayerParams:
        p, pre = self.params, f"layer{layer}"

        def mlp(name):
            return MLP(*(p[f"{pre}.{name}.{k}"] for k in ("W1", "b1", "W2", "b2")))

        return LayerParams(p[f"{pre}.W_f"], mlp("exp_mlp"), p[f"{pre}.W_c"], mlp("bak_mlp"),
                           p[f"{pre}.W_e"], p[f"{pre}.W_b"], p.get(f"{pre}.pos_emb"))

    def relation_embeddings(self) -> Tensor:
        A = Tensor(self._rel_tokens.astype(self.dtype))
        return T.matmul(A, self.params["token_emb"])

    # -- preprocessing
    def node_features(self, graph: AugmentedGraph) -> np.ndarray:
        rf = relation_frequency(graph).astype(np.float64)
        if not self.cfg.use_rfief:
            return rf / rf.sum(axis=1, keepdims=True)
        if self.cfg.ief_numerator == "instance":
            ief = inverse_entity_frequency(self.ef_table, graph.num_nodes)
        else:
            ief = self._ief
        return rf * ief[None, :]

    def prepare(self, instance: SubgraphInstance) -> PreparedInstance:
        if not instance.seeds:
            raise ModelError(f"instance {instance.id}: no seed nodes")
        graph = augment(instance, self.relations, self.cfg.inverse_edges)
        return PreparedInstance(instance, graph, self.node_features(graph))

    def batch(self, items: Sequence) -> ModelBatch:
        prepared = [it if isinstance(it, PreparedInstance) else self.prepare(it) for it in items]
        gb = GraphBatch.from_graphs([p.graph for p in prepared])
        return ModelBatch(gb, np.concatenate([p.features for p in prepared]).astype(self.dtype),
                          [p.instance.question_tokens for p in prepared],
                          [p.instance.answers for p in prepared],
                          [p.instance.id for p in prepared])

    # -- inference
    def initial_embeddings(self, batch: ModelBatch, R: Tensor) -> Tensor:
        return T.matmul(T.matmul(Tensor(batch.features), R), self.params["W_h"])

    def forward(self, batch, trace: Optional[ForwardTrace] = None) -> Tensor:
        """Final per-node scores (sums to 1 inside each graph of the batch)."""
        if not isinstance(batch, ModelBatch):
            batch = self.batch(batch)
        cfg = self.cfg
        R = self.relation_embeddings()
        h0 = self.initial_embeddings(batch, R)
        enc = encode_questions(batch.questions, self.params["token_emb"],
                               self.params.get("token_pos"))
        ig_exp, ig_bak = self.ig_params("ig_exp"), self.ig_params("ig_bak")
        layers = [self.layer_params(i) for i in range(cfg.layers)]
        s0 = Tensor(batch.graph.init_scores.astype(self.dtype))
        q0_exp = q0_bak = None
        state = None
        for it in range(cfg.inference_iterations):
            inst = make_instruction_set(enc, ig_exp, ig_bak, cfg.num_expansion, cfg.num_backup,
                                        q0_exp, q0_bak)
            state = LayerState(s=s0, h=h0)
            states = []
            for lp in layers:
                state = nutrea_layer(batch, state, inst, R, lp, cfg)
                states.append(state)
            if trace is not None:
                trace.passes.append(states)
                trace.instructions.append(inst)
            if it + 1 < cfg.inference_iterations:
                q0_exp, q0_bak = self.next_instruction_seeds(batch, state, ig_exp, ig_bak)
        return state.s

    def next_instruction_seeds(self, batch: ModelBatch, state: LayerState, ig_exp: IGParams,
                               ig_bak: IGParams) -> tuple[Tensor, Tensor]:
        """Seed the next pass's instruction recurrence with a projected score-weighted summary."""
        g = batch.graph
        weighted = state.h * T.reshape(state.s, (-1, 1))
        summary = T.index_add(weighted, g.node_graph, g.num_graphs)
        return T.matmul(summary, ig_exp.update), T.matmul(summary, ig_bak.update)

    def scores(self, instances: Sequence) -> list[np.ndarray]:
        """Per-instance score vectors (no gradient bookkeeping needed by the caller)."""
        batch = self.batch(instances)
        s = self.forward(batch).data
        off = batch.graph.node_offset
        return [s[off[i]:off[i + 1]].copy() for i in range(batch.num_graphs)]


# ---------------------------------------------------------------- checkpoints

def _encode_array(arr: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(arr, dtype="<f4").tobytes()).decode("ascii")


def _decode_array(text: str, shape) -> np.ndarray:
    arr = np.frombuffer(base64.b64decode(text), dtype="<f4")
    if arr.size != int(np.prod(shape)):
        raise CheckpointError(f"tensor data length {arr.size} does not match shape {shape}")
    return arr.reshape(shape).astype(np.float32)


def checkpoint_dict(model: NuTrea, extra: Optional[dict] = None) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "config": asdict(model.cfg),
        "relations": model.relations.base_names,
        "tokens": model.tokens.tokens,
        "ef_table": None if model.ef_table is None else model.ef_table.to_json(),
        "tensors": {name: {"shape": list(t.shape), "data": _encode_array(t.data)}
                    for name, t in model.params.items()},
        **(extra or {}),
    }


def save_checkpoint(model: NuTrea, path, extra: Optional[dict] = None) -> Path:
    path = Path(path)
    path.write_text(json.dumps(checkpoint_dict(model, extra), sort_keys=True))
    return path


def load_checkpoint(path, relations: Optional[RelationVocab] = None,
                    tokens: Optional[TokenVocab] = None) -> NuTrea:
    try:
        obj = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if obj.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"unsupported checkpoint format {obj.get('format')!r}")
    cfg = ModelConfig.from_dict(obj["config"])
    ck_rel = RelationVocab(obj["relations"])
    ck_tok = TokenVocab(obj["tokens"])
    if relations is not None and relations != ck_rel:
        raise CheckpointError("checkpoint relation vocabulary differs from the dataset's")
    if tokens is not None and tokens != ck_tok:
        raise CheckpointError("checkpoint token vocabulary differs from the dataset's")
    ef = None if obj.get("ef_table") is None else EfTable.from_json(obj["ef_table"], ck_rel)
    expected = parameter_shapes(cfg, len(ck_tok), ck_rel.size)
    tensors = obj["tensors"]
    if set(tensors) != set(expected):
        raise CheckpointError("checkpoint tensors do not match the model configuration")
    params = {}
    for name, shape in expected.items():
        if tuple(tensors[name]["shape"]) != tuple(shape):
            raise CheckpointError(f"{name}: shape {tensors[name]['shape']} != expected {list(shape)}")
        params[name] = Tensor(_decode_array(tensors[name]["data"], shape), requires_grad=True)
    return NuTrea(cfg, ck_rel, ck_tok, ef, params)
