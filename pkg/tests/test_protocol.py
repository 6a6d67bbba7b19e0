import json

import pytest

from nutrea.data import SyntheticConfig, generate_splits
from nutrea.model import ModelConfig
from nutrea.protocol import (KEEP_FRACTIONS, LAMBDAS, ProtocolError, protocol_cells, read_results,
                             run_protocol)
from nutrea.train import TrainConfig
from nutrea.train import run_protocol as train_run_protocol

MC = ModelConfig(dim=6, num_expansion=2, num_backup=2, question_positions=4)
TC = TrainConfig(epochs=1, learning_rate=1e-2)


@pytest.fixture(scope="module")
def datasets():
    cfg = SyntheticConfig(nodes_per_graph=10, num_relations=4, hops=1, seed=2)
    return generate_splits(cfg, {"train": 10, "dev": 4, "test": 4})


class TestCells:
    def test_ablation_is_two_by_two(self):
        cells = protocol_cells("ablation")
        assert len(cells) == 4
        assert {dict(c.model_changes)["use_backup"] for c in cells} == {True, False}
        assert {dict(c.model_changes)["use_rfief"] for c in cells} == {True, False}

    def test_lambda_values(self):
        assert [dict(c.model_changes)["lam"] for c in protocol_cells("lambda_sweep")] == list(LAMBDAS)

    def test_keep_fractions(self):
        assert [c.keep_fraction for c in protocol_cells("incomplete_kg")] == list(KEEP_FRACTIONS)

    def test_layer_sweep_pairs_backup(self):
        assert len(protocol_cells("layer_sweep")) == 6

    def test_unknown(self):
        with pytest.raises(ProtocolError):
            protocol_cells("nope")


class TestRun:
    def test_rows_and_table(self, datasets, tmp_path):
        res = run_protocol("lambda_sweep", datasets, MC, TC, seeds=[0, 1],
                           results_path=tmp_path / "r.jsonl")
        assert len(res.rows) == 6 and len(res.table) == 3
        for entry in res.table:
            mine = [r["test_hit_at_1"] for r in res.rows if r["cell"] == entry["cell"]]
            assert entry["test_hit_at_1"] == pytest.approx(sum(mine) / 2)
        assert res.best()["cell"] in {e["cell"] for e in res.table}

    def test_resume_recomputes_nothing(self, datasets, tmp_path):
        path = tmp_path / "r.jsonl"
        run_protocol("lambda_sweep", datasets, MC, TC, seeds=[0], results_path=path)
        seen = []
        res = run_protocol("lambda_sweep", datasets, MC, TC, seeds=[0, 1], results_path=path,
                           progress=seen.append)
        assert len(seen) == 3 and {r["seed"] for r in seen} == {1}
        assert len(read_results(path)) == 6 and len(res.rows) == 6

    def test_changed_config_reruns(self, datasets, tmp_path):
        path = tmp_path / "r.jsonl"
        run_protocol("lambda_sweep", datasets, MC, TC, seeds=[0], results_path=path)
        seen = []
        run_protocol("lambda_sweep", datasets, MC, TrainConfig(epochs=2, learning_rate=1e-2),
                     seeds=[0], results_path=path, progress=seen.append)
        assert len(seen) == 3

    def test_incomplete_kg_keeps_answers(self, datasets, tmp_path, monkeypatch):
        import nutrea.protocol as protocol

        seen = []
        real_train = protocol.train

        def spy(train_ds, dev_ds, *args, **kw):
            seen.append((train_ds, dev_ds))
            return real_train(train_ds, dev_ds, *args, **kw)

        monkeypatch.setattr(protocol, "train", spy)
        run_protocol("incomplete_kg", datasets, MC, TC, seeds=[0])
        base = {i.id: i for i in datasets["train"].instances + datasets["dev"].instances}
        for keep, (tr, dev) in zip(KEEP_FRACTIONS, seen):
            for inst in tr.instances + dev.instances:
                orig = base[inst.id]
                assert inst.answers == orig.answers and inst.question_tokens == orig.question_tokens
                assert set(inst.triplets) <= set(orig.triplets)
            if keep == 1.0:
                assert tr == datasets["train"]

    def test_parallel_matches_serial(self, datasets):
        a = run_protocol("ablation", datasets, MC, TC, seeds=[0])
        b = run_protocol("ablation", datasets, MC, TC, seeds=[0], jobs=2)
        strip = lambda rows: [{k: v for k, v in r.items() if k != "wall_time"} for r in rows]
        assert strip(a.rows) == strip(b.rows)

    def test_train_module_entry_point(self, datasets):
        assert len(train_run_protocol("ablation", datasets, MC, TC, seeds=[0]).rows) == 4

    def test_needs_seeds(self, datasets):
        with pytest.raises(ProtocolError):
            run_protocol("ablation", datasets, MC, TC, seeds=[])

    def test_missing_split(self, datasets):
        with pytest.raises(ProtocolError):
            run_protocol("ablation", {"train": datasets["train"]}, MC, TC)

    def test_corrupt_results_file(self, datasets, tmp_path):
        path = tmp_path / "r.jsonl"
        path.write_text("{bad\n")
        with pytest.raises(ProtocolError, match="r.jsonl:1"):
            run_protocol("ablation", datasets, MC, TC, seeds=[0], results_path=path)

    def test_rows_are_json(self, datasets, tmp_path):
        path = tmp_path / "r.jsonl"
        run_protocol("ablation", datasets, MC, TC, seeds=[0], results_path=path)
        for line in path.read_text().splitlines():
            row = json.loads(line)
            assert {"config_hash", "wall_time", "test_hit_at_1", "cell", "seed"} <= set(row)
