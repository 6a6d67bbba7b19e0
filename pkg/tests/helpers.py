"""Shared random-instance builders for the test suite."""
import numpy as np

from nutrea.data import TokenVocab
from nutrea.graph import RelationVocab, SubgraphInstance
from nutrea.model import ModelConfig, NuTrea
from nutrea.rfief import entity_frequency


def random_instance(rng, vocab: RelationVocab, min_nodes=2, max_nodes=12, density=1.5,
                    num_tokens=8, iid="r"):
    n = int(rng.integers(min_nodes, max_nodes + 1))
    target = int(rng.integers(0, int(density * n) + 1))
    seen = set()
    for _ in range(4 * target):
        if len(seen) >= target:
            break
        h, t = (int(x) for x in rng.integers(0, n, size=2))
        if h != t:
            seen.add((h, int(rng.integers(0, vocab.num_base)), t))
    triplets = tuple(sorted(seen))
    q = tuple(int(x) for x in rng.integers(0, num_tokens, size=int(rng.integers(1, 5))))
    answers = frozenset(int(x) for x in rng.choice(n, size=int(rng.integers(1, 3)), replace=False))
    return SubgraphInstance(iid, q, triplets, n, frozenset({0}), answers)


def token_vocab(vocab: RelationVocab, extra=8):
    return TokenVocab.build([" ".join(f"w{k}" for k in range(extra))], vocab)


def small_model(instances, vocab: RelationVocab, seed=0, dtype=np.float64, **cfg):
    """A NuTrea over ``vocab`` with EF from ``instances``; small dims by default."""
    base = dict(dim=4, num_expansion=2, num_backup=2, question_positions=4)
    base.update(cfg)
    mc = ModelConfig(**base)
    ef = entity_frequency(instances, vocab, mc.inverse_edges)
    return NuTrea(mc, vocab, token_vocab(vocab), ef, seed=seed, dtype=dtype)


# criterion number -> (passed, title, detail); filled by the acceptance tests
ACCEPTANCE_RESULTS: dict = {}
