"""Experiment grids: ablation, lambda sweep, incomplete KG and layer count.

Each (cell, seed) run appends one JSON line to the results file, keyed by a
config hash, so an interrupted grid resumes without recomputing finished runs.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

from .data import Dataset, corrupt_kg
from .model import ModelConfig
from .train import TrainConfig, evaluate, train

log = logging.getLogger(__name__)

PROTOCOLS = ("ablation", "lambda_sweep", "incomplete_kg", "layer_sweep")
DEFAULT_SEEDS = (0, 1, 2, 3, 4)
LAMBDAS = (0.3, 0.6, 1.0)
KEEP_FRACTIONS = (1.0, 0.5, 0.3, 0.1)
LAYER_COUNTS = (1, 2, 3)
METRICS = ("dev_hit_at_1", "dev_f1", "test_hit_at_1", "test_f1")


class ProtocolError(ValueError):
    pass


@dataclass(frozen=True)
class Cell:
    label: str
    model_changes: tuple = ()  # sorted (field, value) pairs
    keep_fraction: float = 1.0


def protocol_cells(name: str) -> list[Cell]:
    if name == "ablation":
        return [Cell(f"rfief={int(rf)},backup={int(bk)}",
                     (("use_backup", bk), ("use_rfief", rf)))
                for rf in (True, False) for bk in (True, False)]
    if name == "lambda_sweep":
        return [Cell(f"lambda={lam}", (("lam", lam),)) for lam in LAMBDAS]
    if name == "incomplete_kg":
        return [Cell(f"keep={k}", (), k) for k in KEEP_FRACTIONS]
    if name == "layer_sweep":
        return [Cell(f"layers={n},backup={int(bk)}", (("layers", n), ("use_backup", bk)))
                for n in LAYER_COUNTS for bk in (True, False)]
    raise ProtocolError(f"unknown protocol {name!r}; choose from {', '.join(PROTOCOLS)}")


def config_hash(obj) -> str:
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def cell_config(cell: Cell, model_cfg: ModelConfig, train_cfg: TrainConfig, seed: int,
                data_tag: str = "") -> dict:
    return {
        "model": asdict(replace(model_cfg, **dict(cell.model_changes))),
        "train": asdict(replace(train_cfg, seed=seed)),
        "keep_fraction": cell.keep_fraction,
        "data": data_tag,
    }


def run_cell(protocol: str, cell: Cell, seed: int, datasets: dict, model_cfg: ModelConfig,
             train_cfg: TrainConfig, data_tag: str = "") -> dict:
    """Train and evaluate one grid cell for one seed."""
    cfg = cell_config(cell, model_cfg, train_cfg, seed, data_tag)
    started = time.perf_counter()
    splits = {k: datasets[k] for k in ("train", "dev", "test")}
    if cell.keep_fraction < 1:
        # answers and questions survive; only base triplets are dropped
        splits = {k: corrupt_kg(ds, cell.keep_fraction, seed=seed * 3 + i)
                  for i, (k, ds) in enumerate(splits.items())}
    mc = ModelConfig.from_dict(cfg["model"])
    tc = TrainConfig.from_dict(cfg["train"])
    model, history = train(splits["train"], splits["dev"], mc, tc)
    dev = evaluate(model, splits["dev"], tc.eval_batch_size)
    test = evaluate(model, splits["test"], tc.eval_batch_size)
    return {
        "protocol": protocol,
        "cell": cell.label,
        "seed": seed,
        "config_hash": config_hash(cfg),
        "config": cfg,
        "dev_hit_at_1": dev.hit_at_1,
        "dev_f1": dev.f1,
        "test_hit_at_1": test.hit_at_1,
        "test_f1": test.f1,
        "best_epoch": history.best_epoch,
        "wall_time": time.perf_counter() - started,
    }


def _run_cell_args(args):
    return run_cell(*args)


@dataclass
class ProtocolResult:
    name: str
    rows: list  # one per (cell, seed), in grid order
    table: list = field(default_factory=list)  # one per cell, metrics averaged over seeds

    def best(self, metric: str = "dev_hit_at_1") -> dict:
        return max(self.table, key=lambda r: r[metric])


def read_results(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        return []
    rows = []
    for n, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rows.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise ProtocolError(f"{path}:{n}: unreadable results row ({exc.msg})") from None
    return rows


def summarize(name: str, cells: Sequence[Cell], rows: Sequence[dict]) -> list[dict]:
    table = []
    for cell in cells:
        mine = [r for r in rows if r["cell"] == cell.label]
        if not mine:
            continue
        entry = {"protocol": name, "cell": cell.label, "seeds": sorted(r["seed"] for r in mine)}
        for m in METRICS:
            entry[m] = math.fsum(r[m] for r in mine) / len(mine)
        entry["wall_time"] = math.fsum(r["wall_time"] for r in mine)
        table.append(entry)
    return table


def run_protocol(name: str, datasets: dict, model_cfg: ModelConfig, train_cfg: TrainConfig,
                 seeds: Sequence[int] = DEFAULT_SEEDS, results_path=None, jobs: int = 1,
                 data_tag: str = "", progress: Optional[Callable[[dict], None]] = None,
                 cells: Optional[Sequence[Cell]] = None) -> ProtocolResult:
    """Run every (cell, seed) of a grid, skipping runs already in ``results_path``."""
    if not seeds:
        raise ProtocolError("need at least one seed")
    for split in ("train", "dev", "test"):
        if split not in datasets or not isinstance(datasets[split], Dataset):
            raise ProtocolError(f"missing {split} split")
    cells = list(cells) if cells is not None else protocol_cells(name)
    done = {}
    for row in read_results(results_path) if results_path else []:
        done[(row["config_hash"], row["seed"])] = row
    todo, keyed = [], []
    for cell in cells:
        for seed in seeds:
            key = (config_hash(cell_config(cell, model_cfg, train_cfg, seed, data_tag)), seed)
            keyed.append(key)
            if key not in done:
                todo.append((name, cell, seed, datasets, model_cfg, train_cfg, data_tag))
    if todo:
        log.info("%s: %d of %d runs to do", name, len(todo), len(keyed))

    def record(row: dict) -> None:
        done[(row["config_hash"], row["seed"])] = row
        if results_path:
            with open(results_path, "a") as fh:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
        if progress is not None:
            progress(row)

    if jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_run_cell_args, args) for args in todo]
            for fut in as_completed(futures):
                record(fut.result())
    else:
        for args in todo:
            record(run_cell(*args))
    rows = [done[k] for k in keyed]
    return ProtocolResult(name, rows, summarize(name, cells, rows))
