"""Dataset files, synthetic path-query generation and incomplete-KG corruption.

On disk a dataset directory holds ``{train,dev,test}.jsonl`` plus the
sidecars ``relations.txt`` (base relation order) and ``vocab.txt`` (tokens).
"""
from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .graph import GraphValidationError, RelationVocab, SubgraphInstance

log = logging.getLogger(__name__)

UNK = "<unk>"
INV_TOKEN = "<inv>"
SELF_LOOP_TOKEN = "<self_loop>"
RESERVED_TOKENS = (UNK, INV_TOKEN, SELF_LOOP_TOKEN)
CONSTRAINT_TOKEN = "with"
SPLITS = ("train", "dev", "test")


class DataError(ValueError):
    pass


def relation_tokens(name: str) -> list[str]:
    return [t for t in re.split(r"[\s_]+", name) if t]


class TokenVocab:
    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[:len(RESERVED_TOKENS)]) != RESERVED_TOKENS:
            tokens = list(RESERVED_TOKENS) + [t for t in tokens if t not in RESERVED_TOKENS]
        if len(set(tokens)) != len(tokens):
            raise DataError("duplicate tokens in vocabulary")
        self.tokens = tokens
        self._ids = {t: i for i, t in enumerate(tokens)}

    @classmethod
    def build(cls, questions: Iterable[str], relations: RelationVocab) -> "TokenVocab":
        seen = set()
        for name in relations.base_names:
            seen.update(relation_tokens(name))
        for q in questions:
            seen.update(q.split())
        return cls(list(RESERVED_TOKENS) + sorted(seen - set(RESERVED_TOKENS)))

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, TokenVocab) and self.tokens == other.tokens

    def id(self, token: str) -> int:
        return self._ids.get(token, 0)

    def encode(self, text: str) -> tuple:
        return tuple(self.id(t) for t in text.split())

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.tokens[i] for i in ids)


@dataclass(frozen=True)
class PathQuerySpec:
    start: int
    relation_path: tuple
    constraint: Optional[tuple] = None  # (base relation id, "out" | "in")

    def validate(self, num_relations: int) -> "PathQuerySpec":
        if not 1 <= len(self.relation_path) <= 4:
            raise DataError(f"path length {len(self.relation_path)} outside [1, 4]")
        if self.constraint is not None:
            rel, direction = self.constraint
            if not 0 <= rel < num_relations or direction not in ("out", "in"):
                raise DataError(f"bad constraint {self.constraint}")
        return self


@dataclass
class Dataset:
    instances: tuple
    relation_vocab: RelationVocab
    token_vocab: TokenVocab
    split: str = "train"
    query_specs: dict = field(default_factory=dict, compare=False, repr=False)

    def __len__(self) -> int:
        return len(self.instances)

    def __eq__(self, other) -> bool:
        return (isinstance(other, Dataset) and self.instances == other.instances
                and self.relation_vocab == other.relation_vocab
                and self.token_vocab == other.token_vocab and self.split == other.split)

    def with_instances(self, instances: Iterable[SubgraphInstance]) -> "Dataset":
        return replace(self, instances=tuple(instances), query_specs=dict(self.query_specs))

    def validate(self) -> "Dataset":
        nb = self.relation_vocab.num_base
        nt = len(self.token_vocab)
        for inst in self.instances:
            inst.validate()
            if any(not 0 <= r < nb for _, r, _ in inst.triplets):
                raise DataError(f"instance {inst.id}: relation id out of vocabulary")
            if any(not 0 <= t < nt for t in inst.question_tokens):
                raise DataError(f"instance {inst.id}: token id out of vocabulary")
        return self


# ---------------------------------------------------------------- file I/O

def read_lines(path: Path) -> list[str]:
    return [ln.strip() for ln in Path(path).read_text().splitlines() if ln.strip()]


def load_relations(path) -> RelationVocab:
    return RelationVocab(read_lines(path))


def load_vocab(path) -> TokenVocab:
    return TokenVocab(read_lines(path))


def instance_to_json(inst: SubgraphInstance, relations: RelationVocab, tokens: TokenVocab) -> dict:
    return {
        "id": inst.id,
        "question": tokens.decode(inst.question_tokens),
        "entities": sorted(inst.seeds),
        "answers": sorted(inst.answers),
        "num_nodes": inst.num_nodes,
        "subgraph": [[h, relations.name(r), t] for h, r, t in inst.triplets],
    }


def write_dataset(ds: Dataset, path) -> Path:
    """Write ``ds`` as JSON lines at ``path`` plus sidecars in the same directory."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for inst in ds.instances:
            fh.write(json.dumps(instance_to_json(inst, ds.relation_vocab, ds.token_vocab),
                                separators=(",", ":")) + "\n")
    (path.parent / "relations.txt").write_text("\n".join(ds.relation_vocab.base_names) + "\n")
    (path.parent / "vocab.txt").write_text("\n".join(ds.token_vocab.tokens) + "\n")
    return path


def _parse_instance(obj: dict, relations: RelationVocab, tokens: TokenVocab,
                    lineno: int) -> tuple[SubgraphInstance, int]:
    try:
        iid = str(obj["id"])
        num_nodes = int(obj["num_nodes"])
        raw = obj["subgraph"]
        seeds = frozenset(int(v) for v in obj["entities"])
        answers = frozenset(int(v) for v in obj.get("answers", []))
        question = str(obj["question"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"line {lineno}: malformed instance ({exc})") from None
    triplets, seen, dupes = [], set(), 0
    for item in raw:
        if not isinstance(item, (list, tuple)) or len(item) != 3:
            raise DataError(f"line {lineno}: malformed triplet {item!r}")
        h, rel, t = item
        try:
            rid = relations.id(str(rel))
        except GraphValidationError:
            raise DataError(f"line {lineno}: unknown relation {rel!r}") from None
        if rid >= relations.num_base:
            raise DataError(f"line {lineno}: relation {rel!r} is not a base relation")
        key = (int(h), rid, int(t))
        if key in seen:
            dupes += 1
            continue
        seen.add(key)
        triplets.append(key)
    inst = SubgraphInstance(id=iid, question_tokens=tokens.encode(question),
                            triplets=tuple(triplets), num_nodes=num_nodes,
                            seeds=seeds, answers=answers)
    try:
        inst.validate()
    except GraphValidationError as exc:
        raise DataError(str(exc)) from None
    return inst, dupes


def load_dataset(path, relations: Optional[RelationVocab] = None,
                 tokens: Optional[TokenVocab] = None) -> Dataset:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"dataset file not found: {path}")
    relations = relations or load_relations(path.parent / "relations.txt")
    lines = path.read_text().splitlines()
    if tokens is None:
        vocab_path = path.parent / "vocab.txt"
        if vocab_path.is_file():
            tokens = load_vocab(vocab_path)
        else:
            questions = []
            for ln in lines:
                if ln.strip():
                    try:
                        questions.append(str(json.loads(ln).get("question", "")))
                    except (json.JSONDecodeError, AttributeError):
                        pass
            tokens = TokenVocab.build(questions, relations)
    instances, dupes, rejected = [], 0, 0
    for lineno, ln in enumerate(lines, start=1):
        if not ln.strip():
            continue
        try:
            obj = json.loads(ln)
        except json.JSONDecodeError as exc:
            raise DataError(f"line {lineno}: invalid JSON ({exc.msg})") from None
        if not isinstance(obj, dict):
            raise DataError(f"line {lineno}: expected a JSON object")
        inst, d = _parse_instance(obj, relations, tokens, lineno)
        dupes += d
        if not inst.triplets:
            rejected += 1
            continue
        instances.append(inst)
    if dupes:
        log.warning("%s: dropped %d duplicate triplets", path, dupes)
    if rejected:
        log.warning("%s: rejected %d instances with empty subgraphs", path, rejected)
    split = path.stem if path.stem in SPLITS else "train"
    return Dataset(tuple(instances), relations, tokens, split).validate()


# ---------------------------------------------------------------- oracle

def oracle_answer(graph: SubgraphInstance, spec: PathQuerySpec) -> set[int]:
    """Execute a path query exhaustively over the base triplets."""
    frontier = {spec.start}
    for rel in spec.relation_path:
        frontier = {t for h, r, t in graph.triplets if r == rel and h in frontier}
    if spec.constraint is not None:
        crel, direction = spec.constraint
        if direction == "out":
            ok = {h for h, r, _ in graph.triplets if r == crel}
        else:
            ok = {t for _, r, t in graph.triplets if r == crel}
        frontier &= ok
    return frontier


# ---------------------------------------------------------------- generator

@dataclass(frozen=True)
class SyntheticConfig:
    num_instances: int = 100
    nodes_per_graph: int = 30
    num_relations: int = 12
    edge_factor: float = 2.0
    hops: int = 2
    constraint_fraction: float = 0.5
    seed: int = 0
    unanswerable_fraction: float = 0.0
    relation_skew: float = 1.0
    constraint_direction: str = "out"

    def validate(self) -> "SyntheticConfig":
        if not 1 <= self.hops <= 4:
            raise DataError("hops must be in [1, 4]")
        if self.nodes_per_graph < self.hops + 1:
            raise DataError("nodes_per_graph must be >= hops + 1")
        if self.num_relations < 2:
            raise DataError("num_relations must be >= 2")
        if self.num_instances < 1:
            raise DataError("num_instances must be >= 1")
        if not 0 <= self.constraint_fraction <= 1 or not 0 <= self.unanswerable_fraction <= 1:
            raise DataError("fractions must lie in [0, 1]")
        if self.constraint_direction not in ("out", "in"):
            raise DataError("constraint_direction must be 'out' or 'in'")
        return self


def relation_names(n: int) -> list[str]:
    width = max(2, len(str(n - 1)))
    return [f"rel{k:0{width}d}" for k in range(n)]


def _sample_triplets(rng: np.random.Generator, cfg: SyntheticConfig) -> tuple:
    n = cfg.nodes_per_graph
    target = max(1, int(round(cfg.edge_factor * n)))
    weights = 1.0 / np.arange(1, cfg.num_relations + 1) ** cfg.relation_skew
    weights /= weights.sum()
    seen, out = set(), []
    for _ in range(20 * target):
        if len(out) >= target:
            break
        h, t = rng.integers(0, n, size=2)
        if h == t:
            continue
        r = int(rng.choice(cfg.num_relations, p=weights))
        key = (int(h), r, int(t))
        if key not in seen:
            seen.add(key)
            out.append(key)
    return tuple(out)


def _sample_spec(rng: np.random.Generator, inst: SubgraphInstance, cfg: SyntheticConfig,
                 constrained: bool) -> Optional[PathQuerySpec]:
    out_edges: dict[int, list] = {}
    for h, r, t in inst.triplets:
        out_edges.setdefault(h, []).append((r, t))
    starts = sorted(out_edges)
    if not starts:
        return None
    start = starts[int(rng.integers(len(starts)))]
    node, path = start, []
    for _ in range(cfg.hops):
        choices = out_edges.get(node)
        if not choices:
            return None
        r, node = choices[int(rng.integers(len(choices)))]
        path.append(r)
    spec = PathQuerySpec(start, tuple(path))
    if not constrained:
        return spec
    candidates = oracle_answer(inst, spec)
    if len(candidates) < 2:
        return None
    options = []
    for crel in range(cfg.num_relations):
        cspec = PathQuerySpec(start, tuple(path), (crel, cfg.constraint_direction))
        kept = oracle_answer(inst, cspec)
        # the question carries no direction, so the split must not depend on it
        touching = {v for h, r, t in inst.triplets if r == crel for v in (h, t)}
        if 0 < len(kept) < len(candidates) and kept == candidates & touching:
            options.append(cspec)
    if not options:
        return None
    return options[int(rng.integers(len(options)))]


def question_text(spec: PathQuerySpec, names: Sequence[str]) -> str:
    words = [names[r] for r in spec.relation_path]
    if spec.constraint is not None:
        words += [CONSTRAINT_TOKEN, names[spec.constraint[0]]]
    return " ".join(words)


def _drop_final_hop(inst: SubgraphInstance, spec: PathQuerySpec) -> SubgraphInstance:
    frontier = {spec.start}
    for rel in spec.relation_path[:-1]:
        frontier = {t for h, r, t in inst.triplets if r == rel and h in frontier}
    last = spec.relation_path[-1]
    kept = tuple(tr for tr in inst.triplets if not (tr[1] == last and tr[0] in frontier))
    return replace(inst, triplets=kept)


def generate_synthetic(cfg: SyntheticConfig, split: str = "train", id_prefix: str = "") -> Dataset:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    names = relation_names(cfg.num_relations)
    relations = RelationVocab(names)
    insts, texts, specs = [], [], {}
    skipped = 0
    for k in range(cfg.num_instances):
        constrained = bool(rng.random() < cfg.constraint_fraction)
        unanswerable = bool(rng.random() < cfg.unanswerable_fraction)
        base = SubgraphInstance(id=f"{id_prefix}{split}-{k:05d}", question_tokens=(),
                                triplets=_sample_triplets(rng, cfg),
                                num_nodes=cfg.nodes_per_graph, seeds=frozenset({0}))
        spec = None
        for _ in range(100):
            spec = _sample_spec(rng, base, cfg, constrained)
            if spec is not None:
                break
        if spec is None:
            skipped += 1
            continue
        if unanswerable:
            base = _drop_final_hop(base, spec)
        answers = frozenset(oracle_answer(base, spec))
        inst = replace(base, seeds=frozenset({spec.start}), answers=answers)
        insts.append(inst)
        texts.append(question_text(spec, names))
        specs[inst.id] = spec
    if skipped:
        log.warning("generate_synthetic: skipped %d unrealizable instances", skipped)
    if not insts:
        raise DataError("generator produced zero instances")
    tokens = TokenVocab.build(texts, relations)
    insts = [replace(inst, question_tokens=tokens.encode(text)) for inst, text in zip(insts, texts)]
    return Dataset(tuple(insts), relations, tokens, split, specs)


def generate_splits(cfg: SyntheticConfig, sizes: dict) -> dict[str, Dataset]:
    """One seeded stream, cut into consecutive splits sharing both vocabularies."""
    total = sum(sizes.values())
    full = generate_synthetic(replace(cfg, num_instances=total), split="all")
    parts = [full]
    have, top_up = len(full), 0
    while have < total:
        # unrealisable draws were skipped; replace them from a derived stream
        top_up += 1
        if top_up > 100:
            raise DataError("generator cannot realise enough instances for the requested splits")
        extra = generate_synthetic(replace(cfg, num_instances=total - have,
                                           seed=cfg.seed + 1_000_003 * top_up),
                                   split="all", id_prefix=f"t{top_up}-")
        parts.append(extra)
        have += len(extra)
    texts = [(inst, ds.token_vocab.decode(inst.question_tokens), ds.query_specs[inst.id])
             for ds in parts for inst in ds.instances]
    vocab = full.token_vocab if len(parts) == 1 else \
        TokenVocab.build([t for _, t, _ in texts], full.relation_vocab)
    out, pos = {}, 0
    for split, n in sizes.items():
        chunk = texts[pos:pos + n]
        pos += n
        insts = tuple(replace(inst, id=f"{split}-{i:05d}", question_tokens=vocab.encode(text))
                      for i, (inst, text, _) in enumerate(chunk))
        specs = {new.id: spec for new, (_, _, spec) in zip(insts, chunk)}
        out[split] = Dataset(insts, full.relation_vocab, vocab, split, specs)
    return out


# ---------------------------------------------------------------- corruption

def corrupt_kg(ds: Dataset, keep_fraction: float, seed: int) -> Dataset:
    """Keep floor(keep_fraction * |triplets|) base triplets per instance, uniformly."""
    if not 0 < keep_fraction <= 1:
        raise DataError("keep_fraction must lie in (0, 1]")
    if keep_fraction == 1:
        return ds.with_instances(ds.instances)
    rng = np.random.default_rng(seed)
    out = []
    for inst in ds.instances:
        n = len(inst.triplets)
        keep = math.floor(keep_fraction * n + 1e-9)  # 0.3 * 10 must give 3
        idx = np.sort(rng.choice(n, size=keep, replace=False)) if n else np.array([], dtype=int)
        out.append(replace(inst, triplets=tuple(inst.triplets[i] for i in idx)))
    return ds.with_instances(out)
