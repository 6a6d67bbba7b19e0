import numpy as np
import pytest

from nutrea import tensor as T
from nutrea.encoder import InstructionSet
from nutrea.graph import RelationVocab, SubgraphInstance
from nutrea.model import (MLP, CheckpointError, ForwardTrace, LayerParams, LayerState, ModelConfig,
                          ModelError, backup_step, expansion_step, load_checkpoint, node_ranking,
                          nutrea_layer, save_checkpoint)
from nutrea.tensor import Tensor, finite_diff_check
from nutrea.train import batch_kl_loss

from .helpers import random_instance, small_model

VOCAB = RelationVocab(["r0", "r1", "r2"])
LD = np.longdouble


def inst(triplets, n, seeds=(0,), answers=(1,), q=(5, 6)):
    return SubgraphInstance("m", tuple(q), tuple(triplets), n, frozenset(seeds), frozenset(answers))


def tensors(rng, *shapes):
    return [Tensor(rng.normal(size=s), requires_grad=True) for s in shapes]


def rand_mlp(rng, width, D):
    return MLP(*tensors(rng, (width, D), (D,), (D, D), (D,)))


def rand_layer(rng, D, N, M, R=None):
    return LayerParams(*tensors(rng, (D, D)), rand_mlp(rng, (N + 1) * D, D), *tensors(rng, (D, D)),
                       rand_mlp(rng, (M + 1) * D, D), *tensors(rng, (D, 1), (D, 1)),
                       pos_emb=None if R is None else Tensor(rng.normal(size=(R, D))))


def layer_inputs(model, instance, rng):
    b = model.batch([instance])
    D = model.cfg.dim
    R = model.relation_embeddings()
    h = model.initial_embeddings(b, R)
    q = InstructionSet([Tensor(rng.normal(size=(1, D))) for _ in range(model.cfg.num_expansion)],
                       [Tensor(rng.normal(size=(1, D))) for _ in range(model.cfg.num_backup)], [])
    return b, R, h, q


class TestExpansion:
    def test_hand_value(self):
        D = 3
        g = inst([(0, 0, 1)], 2)
        m = small_model([g], VOCAB, dim=D, num_expansion=1)
        b = m.batch([g])
        R = Tensor(np.random.default_rng(0).normal(size=(VOCAB.size, D)))
        # MLP that returns the message half of its input unchanged (messages are >= 0)
        W1 = Tensor(np.vstack([np.zeros((D, D)), np.eye(D)]))
        lp = LayerParams(Tensor(np.eye(D)), MLP(W1, Tensor(np.zeros(D)), Tensor(np.eye(D)), Tensor(np.zeros(D))),
                         None, None, None, None)
        s = Tensor(np.array([1.0, 0.0]))
        f = expansion_step(b, s, Tensor(np.zeros((2, D))), [Tensor(np.ones((1, D)))], R, lp)
        expected_1 = np.maximum(R.data[0], 0)
        expected_0 = np.maximum(R.data[VOCAB.self_loop], 0)  # seed's own self-loop
        np.testing.assert_allclose(f.data, [expected_0, expected_1])

    def test_isolated_seed_only_receives_self_loop(self):
        rng = np.random.default_rng(1)
        g = inst([(1, 0, 2), (2, 1, 3)], 4)
        m = small_model([g], VOCAB)
        b, R, h, q = layer_inputs(m, g, rng)
        lp = rand_layer(rng, 4, 2, 2)
        zero_mlp = MLP(Tensor(np.vstack([np.zeros((4, 4)), np.eye(4), np.eye(4)])), Tensor(np.zeros(4)),
                       Tensor(np.eye(4)), Tensor(np.zeros(4)))
        lp.exp_mlp = zero_mlp
        f = expansion_step(b, Tensor(b.graph.init_scores), Tensor(np.zeros((4, 4))), q.expansion, R, lp)
        assert np.abs(f.data[1:]).sum() == 0 and np.abs(f.data[0]).sum() > 0

    def test_skip_matches_dense(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            g = random_instance(rng, VOCAB)
            m = small_model([g], VOCAB)
            b, R, h, q = layer_inputs(m, g, rng)
            lp = rand_layer(rng, 4, 2, 2)
            s = rng.random(g.num_nodes) * (rng.random(g.num_nodes) < 0.5)
            a = expansion_step(b, Tensor(s), h, q.expansion, R, lp, skip_zero_scores=True)
            d = expansion_step(b, Tensor(s), h, q.expansion, R, lp, skip_zero_scores=False)
            np.testing.assert_allclose(a.data, d.data, atol=1e-6)


class TestBackup:
    def test_depth_zero_pools_self_loop_only(self):
        rng = np.random.default_rng(3)
        g = random_instance(rng, VOCAB, min_nodes=5)
        m = small_model([g], VOCAB, num_backup=1)
        b, R, _, q = layer_inputs(m, g, rng)
        lp = rand_layer(rng, 4, 2, 1)
        ident = MLP(Tensor(np.vstack([np.zeros((4, 4)), np.eye(4)])), Tensor(np.zeros(4)),
                    Tensor(np.eye(4)), Tensor(np.zeros(4)))
        lp.bak_mlp = ident
        f = Tensor(rng.normal(size=(g.num_nodes, 4)))
        h = backup_step(b, f, q.backup, R, lp, 0)
        msg = np.maximum((R.data[VOCAB.self_loop] @ lp.W_c.data) * q.backup[0].data[0], 0)
        np.testing.assert_allclose(h.data, np.tile(msg, (g.num_nodes, 1)), atol=1e-12)

    def test_two_edge_subtree_by_hand(self):
        rng = np.random.default_rng(4)
        g = inst([(0, 1, 1)], 2)
        m = small_model([g], VOCAB, num_backup=1, inverse_edges=False)
        b, R, _, q = layer_inputs(m, g, rng)
        lp = rand_layer(rng, 4, 2, 1)
        lp.bak_mlp = MLP(Tensor(np.vstack([np.zeros((4, 4)), np.eye(4)])), Tensor(np.zeros(4)),
                         Tensor(np.eye(4)), Tensor(np.zeros(4)))
        h = backup_step(b, Tensor(np.zeros((2, 4))), q.backup, R, lp, 0)
        # K=0 on node 0: its self-loop only.  Edge (0,r1,1) joins once K=1.
        c = lambda r: np.maximum((R.data[r] @ lp.W_c.data) * q.backup[0].data[0], 0)
        np.testing.assert_allclose(h.data[0], c(VOCAB.self_loop))
        h1 = backup_step(b, Tensor(np.zeros((2, 4))), q.backup, R, lp, 1)
        np.testing.assert_allclose(h1.data[0], np.maximum(c(1), c(VOCAB.self_loop)))

    def test_relation_pool_equals_edge_pool(self):
        """Pooling per distinct relation equals pooling over every edge of E_v."""
        rng = np.random.default_rng(5)
        for K in (0, 1, 2):
            for _ in range(10):
                g = random_instance(rng, VOCAB)
                m = small_model([g], VOCAB, subtree_depth=K)
                b, R, _, q = layer_inputs(m, g, rng)
                lp = rand_layer(rng, 4, 2, 2)
                lp.bak_mlp = MLP(Tensor(np.vstack([np.zeros((4, 8)), np.eye(8)])), Tensor(np.zeros(8)),
                                 Tensor(np.eye(8)), Tensor(np.zeros(8)))
                pooled = backup_step(b, Tensor(np.zeros((g.num_nodes, 4))), q.backup, R, lp, K).data
                graph = b.graph.graphs[0]
                for v in range(g.num_nodes):
                    rows = []
                    for e in graph.subtree_edges(v, K):
                        r = graph.rels[e]
                        rows.append(np.concatenate([np.maximum((R.data[r] @ lp.W_c.data) * qj.data[0], 0)
                                                    for qj in q.backup]))
                    np.testing.assert_allclose(pooled[v], np.max(rows, axis=0), atol=1e-12)


class TestNodeRanking:
    def setup_method(self):
        rng = np.random.default_rng(6)
        self.g = random_instance(rng, VOCAB, min_nodes=5)
        self.m = small_model([self.g], VOCAB)
        self.b = self.m.batch([self.g])
        self.lp = rand_layer(rng, 4, 2, 2)
        self.f = Tensor(rng.normal(size=(self.g.num_nodes, 4)))
        self.h = Tensor(rng.normal(size=(self.g.num_nodes, 4)))

    def test_lambda_zero(self):
        s = node_ranking(self.b, self.f, self.h, 0.0, self.lp).data
        se = (self.f.data @ self.lp.W_e.data).ravel()
        ref = np.exp(se - se.max()) / np.exp(se - se.max()).sum()
        np.testing.assert_allclose(s, ref, atol=1e-15)
        assert np.argmax(s) == np.argmax(se)

    def test_uniform(self):
        n = self.g.num_nodes
        f = Tensor(np.tile(self.f.data[0], (n, 1)))
        h = Tensor(np.tile(self.h.data[0], (n, 1)))
        np.testing.assert_allclose(node_ranking(self.b, f, h, 1.0, self.lp).data, 1.0 / n)

    def test_shift_invariance(self):
        a = node_ranking(self.b, self.f, self.h, 0.6, self.lp).data
        w = self.lp.W_e.data.ravel()
        shift = Tensor(self.f.data + 3.0 * w / (w @ w))  # adds 3 to every expansion score
        np.testing.assert_allclose(node_ranking(self.b, shift, self.h, 0.6, self.lp).data, a, atol=1e-12)

    def test_continuous_in_lambda(self):
        fn = lambda lam: (node_ranking(self.b, self.f, self.h, float(lam.data[0]), self.lp)
                          * Tensor(np.arange(self.g.num_nodes, dtype=float))).sum()
        lam = 0.4
        eps = 1e-6
        diff = (fn(Tensor([lam + eps])).item() - fn(Tensor([lam - eps])).item()) / (2 * eps)
        s = node_ranking(self.b, self.f, self.h, lam, self.lp).data
        sb = (self.h.data @ self.lp.W_b.data).ravel()
        v = np.arange(self.g.num_nodes)
        analytic = np.sum(v * s * (sb - s @ sb))
        assert diff == pytest.approx(analytic, rel=1e-5)


class TestLayer:
    def test_composition(self):
        rng = np.random.default_rng(7)
        g = random_instance(rng, VOCAB)
        m = small_model([g], VOCAB)
        b, R, h, q = layer_inputs(m, g, rng)
        lp = rand_layer(rng, 4, 2, 2)
        s0 = Tensor(b.graph.init_scores)
        out = nutrea_layer(b, LayerState(s0, h), q, R, lp, m.cfg)
        f = expansion_step(b, s0, h, q.expansion, R, lp)
        hb = backup_step(b, f, q.backup, R, lp, m.cfg.subtree_depth)
        np.testing.assert_array_equal(out.s.data, node_ranking(b, f, hb, m.cfg.lam, lp).data)
        assert out.s.data.sum() == pytest.approx(1.0, abs=1e-6)

    def test_backup_off_passes_f_through(self):
        rng = np.random.default_rng(8)
        g = random_instance(rng, VOCAB)
        m = small_model([g], VOCAB, use_backup=False)
        b, R, h, q = layer_inputs(m, g, rng)
        out = nutrea_layer(b, LayerState(Tensor(b.graph.init_scores), h), q, R, rand_layer(rng, 4, 2, 2), m.cfg)
        assert out.h is out.f


def backup_reach_gradient(K: int, use_backup: bool) -> float:
    """d(node 2 ranking score)/d(relation embedding of edge d) after one layer.

    Path 1 -> 2 -> 4 -> 5 with seed 1; edge d is (4, r2, 5), two hops from
    node 2.  The normalised score s_2 couples every node through the softmax
    denominator, so the ranking score before normalisation is what isolates
    node 2's own receptive field.
    """
    vocab = RelationVocab(["a", "b", "d"])
    g = SubgraphInstance("reach", (4, 5), ((1, 0, 2), (2, 1, 4), (4, 2, 5)), 6, frozenset({1}),
                         frozenset({4}))
    m = small_model([g], vocab, seed=3, layers=1, subtree_depth=K, use_backup=use_backup)
    b = m.batch([g])
    rng = np.random.default_rng(0)
    R = Tensor(m.relation_embeddings().data, requires_grad=True)
    h0 = m.initial_embeddings(b, R)
    D = m.cfg.dim
    q = InstructionSet([Tensor(rng.normal(size=(1, D))) for _ in range(2)],
                       [Tensor(np.abs(rng.normal(size=(1, D)))) for _ in range(2)], [])
    lp = m.layer_params(0)
    out = nutrea_layer(b, LayerState(Tensor(b.graph.init_scores), h0), q, R, lp, m.cfg)
    score = T.matmul(out.f, lp.W_e)
    if use_backup:
        score = score + T.matmul(out.h, lp.W_b) * m.cfg.lam
    T.backward(score[2].sum())
    return float(np.abs(R.grad[vocab.id("d")]).max())


class TestBackupReach:
    def test_backup_reaches_edge_d(self):
        assert backup_reach_gradient(2, True) > 1e-8

    def test_no_backup_is_exactly_zero(self):
        assert backup_reach_gradient(2, False) == 0.0

    def test_depth_zero_is_exactly_zero(self):
        assert backup_reach_gradient(0, True) == 0.0


class TestForward:
    def test_batch_equals_single(self):
        rng = np.random.default_rng(9)
        insts = [random_instance(rng, VOCAB, iid=f"i{k}") for k in range(5)]
        m = small_model(insts, VOCAB, seed=1)
        together = m.scores(insts)
        for i, s in zip(insts, together):
            np.testing.assert_allclose(m.scores([i])[0], s, atol=1e-12)

    def test_deterministic(self):
        rng = np.random.default_rng(10)
        insts = [random_instance(rng, VOCAB, iid=f"i{k}") for k in range(3)]
        m = small_model(insts, VOCAB, dtype=np.float32)
        a, b = m.scores(insts), m.scores(insts)
        assert all(x.tobytes() == y.tobytes() for x, y in zip(a, b))

    def test_inference_iterations(self):
        rng = np.random.default_rng(11)
        g = random_instance(rng, VOCAB)
        for iters in (1, 2, 3):
            m = small_model([g], VOCAB, inference_iterations=iters, layers=2)
            trace = ForwardTrace()
            m.forward([g], trace)
            assert len(trace.passes) == iters and all(len(p) == 2 for p in trace.passes)

    def test_layer_scores_normalised(self):
        rng = np.random.default_rng(12)
        insts = [random_instance(rng, VOCAB, iid=f"i{k}") for k in range(4)]
        m = small_model(insts, VOCAB, layers=3)
        trace = ForwardTrace()
        m.forward(insts, trace)
        off = m.batch(insts).graph.node_offset
        for p in trace.passes:
            for st in p:
                assert np.all(st.s.data >= 0)
                for k in range(4):
                    assert st.s.data[off[k]:off[k + 1]].sum() == pytest.approx(1.0, abs=1e-6)

    def test_no_seeds(self):
        g = SubgraphInstance("z", (1,), ((0, 0, 1),), 2, frozenset(), frozenset())
        m = small_model([inst([(0, 0, 1)], 2)], VOCAB)
        with pytest.raises(ModelError, match="seed"):
            m.forward([g])

    def test_rfief_off_uses_mean_relation_embedding(self):
        g = inst([(0, 0, 1), (1, 1, 2)], 3)
        m = small_model([g], VOCAB, use_rfief=False)
        feats = m.prepare(g).features
        np.testing.assert_allclose(feats.sum(axis=1), 1.0)
        assert feats[1, VOCAB.self_loop] == pytest.approx(1 / 5)

    def test_config_validation(self):
        with pytest.raises(ModelError):
            ModelConfig(layers=0).validate()
        with pytest.raises(ModelError):
            ModelConfig.from_dict({"bogus": 1})


def model_gradient_error(model, instance) -> float:
    model = model.astype(LD)
    batch = model.batch([instance])
    worst = 0.0
    for name in sorted(model.params):
        orig = model.params[name]

        def f(x, name=name, orig=orig):
            model.params[name] = x
            try:
                return batch_kl_loss(model.forward(batch), batch)
            finally:
                model.params[name] = orig

        worst = max(worst, finite_diff_check(f, orig, eps=1e-5, dtype=LD))
    return worst


class TestGradients:
    def test_two_layer_model_kl(self):
        g = inst([(0, 0, 1), (1, 1, 2), (2, 2, 3), (3, 0, 1)], 4, answers=(2,))
        m = small_model([g], VOCAB, dim=3, layers=2, inference_iterations=2, question_positions=2)
        assert model_gradient_error(m, g) < 1e-4

    def test_position_embeddings(self):
        g = inst([(0, 0, 1), (1, 1, 2)], 3, answers=(2,))
        m = small_model([g], VOCAB, dim=2, layers=1, inference_iterations=1,
                        use_position_embeddings=True, question_positions=0, num_expansion=1,
                        num_backup=1)
        assert model_gradient_error(m, g) < 1e-4


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(13)
        g = random_instance(rng, VOCAB)
        m = small_model([g], VOCAB, dtype=np.float32)
        save_checkpoint(m, tmp_path / "c.json")
        back = load_checkpoint(tmp_path / "c.json", VOCAB, m.tokens)
        for k in m.params:
            np.testing.assert_array_equal(back.params[k].data, m.params[k].data)
        np.testing.assert_array_equal(back.scores([g])[0], m.scores([g])[0])

    def test_bytes_stable(self, tmp_path):
        m = small_model([inst([(0, 0, 1)], 2)], VOCAB, dtype=np.float32)
        save_checkpoint(m, tmp_path / "a.json")
        save_checkpoint(load_checkpoint(tmp_path / "a.json"), tmp_path / "b.json")
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()

    def test_format_tag(self, tmp_path):
        m = small_model([inst([(0, 0, 1)], 2)], VOCAB, dtype=np.float32)
        p = save_checkpoint(m, tmp_path / "c.json")
        p.write_text(p.read_text().replace("nutrea-ckpt-v1", "other-v9"))
        with pytest.raises(CheckpointError, match="format"):
            load_checkpoint(p)

    def test_shape_mismatch(self, tmp_path):
        import json
        m = small_model([inst([(0, 0, 1)], 2)], VOCAB, dtype=np.float32)
        p = save_checkpoint(m, tmp_path / "c.json")
        obj = json.loads(p.read_text())
        obj["config"]["dim"] = 5
        p.write_text(json.dumps(obj))
        with pytest.raises(CheckpointError):
            load_checkpoint(p)

    def test_vocab_mismatch(self, tmp_path):
        m = small_model([inst([(0, 0, 1)], 2)], VOCAB, dtype=np.float32)
        p = save_checkpoint(m, tmp_path / "c.json")
        with pytest.raises(CheckpointError, match="relation"):
            load_checkpoint(p, RelationVocab(["x"]))
