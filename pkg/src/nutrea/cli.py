"""``nutrea`` command line: generate | train | eval | protocol | inspect.

Settings resolve as defaults < ``--config`` file < flags < ``NUTREA_SEED``
(seed only).  The config file holds ``key = value`` lines; keys are the
field names of the model, training and generator configs plus a few
command keys (``data``, ``out``, ``seed``, ``split`` ...).  ``#`` starts a
comment.  Unknown keys are rejected.

Exit codes: 0 success, 1 usage or configuration error, 2 data or
validation error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import typing
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

from .data import (SPLITS, DataError, SyntheticConfig, corrupt_kg, generate_splits,
                   load_dataset, write_dataset)
from .graph import GraphValidationError, augment
from .model import CheckpointError, ModelConfig, ModelError, load_checkpoint, save_checkpoint
from .protocol import PROTOCOLS, ProtocolError, run_protocol
from .rfief import (EfTable, RFIEFError, entity_frequency, inspect_weights,
                    inverse_entity_frequency, relation_frequency)
from .train import TrainConfig, TrainingError, evaluate, train

log = logging.getLogger("nutrea")

SEED_ENV = "NUTREA_SEED"
RUN_CONFIG_FILE = "run_config.json"


class UsageError(Exception):
    pass


DATA_ERRORS = (DataError, GraphValidationError, CheckpointError, RFIEFError, ProtocolError,
               TrainingError, FileNotFoundError)

# command-specific keys: name -> (default, type)
COMMAND_KEYS = {
    "generate": {"out": (None, str), "seed": (0, int), "train_size": (2000, int),
                 "dev_size": (250, int), "test_size": (250, int), "force": (False, bool)},
    "train": {"data": (None, str), "out": (None, str), "seed": (0, int), "ef_table": (None, str)},
    "eval": {"data": (None, str), "out": (None, str), "seed": (0, int), "checkpoint": (None, str),
             "split": ("test", str), "corrupt_keep": (1.0, float)},
    "protocol": {"data": (None, str), "out": (None, str), "seed": (0, int), "name": (None, str),
                 "seeds": ("0,1,2,3,4", str), "jobs": (1, int)},
    "inspect": {"data": (None, str), "out": (None, str), "seed": (0, int), "split": ("train", str),
                "instance": (None, str), "node": (None, int), "checkpoint": (None, str),
                "ef_table": (None, str)},
}
CONFIG_SECTIONS = {
    "generate": (SyntheticConfig,),
    "train": (ModelConfig, TrainConfig),
    "eval": (),
    "protocol": (ModelConfig, TrainConfig),
    "inspect": (),
}
EXCLUDED_FIELDS = {SyntheticConfig: {"num_instances", "seed"}, TrainConfig: {"seed"}}


@dataclass
class RunConfig:
    """Resolved settings of one command, hashed for provenance."""

    command: str
    settings: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"command": self.command, "settings": self.settings, "hash": self.hash()}

    def hash(self) -> str:
        # the output location is not part of what a run computes
        body = {k: v for k, v in self.settings.items() if k not in ("out", "force")}
        text = json.dumps({"command": self.command, "settings": body}, sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def section(self, cls):
        names = {f.name for f in fields(cls)} - EXCLUDED_FIELDS.get(cls, set())
        values = {k: v for k, v in self.settings.items() if k in names}
        if "seed" in {f.name for f in fields(cls)}:
            values["seed"] = self.settings["seed"]
        try:
            return cls(**values).validate()
        except (ModelError, TrainingError, DataError) as exc:
            raise UsageError(str(exc)) from None

    def write(self, directory) -> Path:
        path = Path(directory) / RUN_CONFIG_FILE
        path.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")
        return path


def allowed_keys(command: str) -> dict:
    """Key -> (default, type) for every setting the command accepts."""
    out = {}
    for cls in CONFIG_SECTIONS[command]:
        hints = typing.get_type_hints(cls)
        for f in fields(cls):
            if f.name not in EXCLUDED_FIELDS.get(cls, set()):
                out[f.name] = (f.default, hints[f.name])
    out.update(COMMAND_KEYS[command])
    return out


def _coerce(key: str, text: str, kind):
    text = text.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
    except ValueError:
        raise UsageError(f"config key {key!r}: cannot read {text!r} as {kind.__name__}") from None
    return text


def read_config_file(path, command: str) -> dict:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    keys = allowed_keys(command)
    out = {}
    for n, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in keys:
            raise UsageError(f"{path}:{n}: unknown key {key!r} for {command}")
        out[key] = _coerce(key, value, keys[key][1])
    return out


def resolve(command: str, args: argparse.Namespace, env=None) -> RunConfig:
    env = os.environ if env is None else env
    keys = allowed_keys(command)
    settings = {k: d for k, (d, _) in keys.items()}
    if getattr(args, "config", None):
        settings.update(read_config_file(args.config, command))
    for key, value in vars(args).items():
        if key in keys and value is not None:
            settings[key] = value
    if env.get(SEED_ENV):
        settings["seed"] = _coerce(SEED_ENV, env[SEED_ENV], int)
    return RunConfig(command, settings)


# ---------------------------------------------------------------- commands

def _require(cfg: RunConfig, *keys: str) -> None:
    missing = [k for k in keys if cfg.settings.get(k) is None]
    if missing:
        raise UsageError(f"{cfg.command}: missing --{missing[0].replace('_', '-')}")


def _split_path(data, split: str) -> Path:
    path = Path(data) / f"{split}.jsonl"
    if not path.is_file():
        raise DataError(f"dataset file not found: {path}")
    return path


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.settings["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_generate(cfg: RunConfig) -> int:
    _require(cfg, "out")
    syn = cfg.section(SyntheticConfig)
    sizes = {s: cfg.settings[f"{s}_size"] for s in SPLITS}
    if any(n < 1 for n in sizes.values()):
        raise UsageError("split sizes must be >= 1")
    out = Path(cfg.settings["out"])
    existing = [out / f"{s}.jsonl" for s in SPLITS if (out / f"{s}.jsonl").exists()]
    if existing and not cfg.settings["force"]:
        raise UsageError(f"{existing[0]} exists; pass --force to overwrite")
    splits = generate_splits(syn, sizes)
    out.mkdir(parents=True, exist_ok=True)
    for name, ds in splits.items():
        write_dataset(ds, out / f"{name}.jsonl")
    cfg.write(out)
    print(json.dumps({s: len(ds) for s, ds in splits.items()}))
    return 0


def cmd_train(cfg: RunConfig) -> int:
    _require(cfg, "data", "out")
    mc, tc = cfg.section(ModelConfig), cfg.section(TrainConfig)
    train_ds = load_dataset(_split_path(cfg.settings["data"], "train"))
    dev_path = Path(cfg.settings["data"]) / "dev.jsonl"
    dev_ds = load_dataset(dev_path, train_ds.relation_vocab, train_ds.token_vocab) \
        if dev_path.is_file() else None
    out = _out_dir(cfg)
    if cfg.settings["ef_table"]:
        ef = EfTable.load(cfg.settings["ef_table"], train_ds.relation_vocab)
    else:
        ef = entity_frequency(train_ds, train_ds.relation_vocab, mc.inverse_edges)
    ef.save(out / "ef_table.json")
    model, history = train(train_ds, dev_ds, mc, tc, ef_table=ef,
                           progress=lambda row: log.info("epoch %s", row))
    save_checkpoint(model, out / "checkpoint.json", extra={"run_config_hash": cfg.hash()})
    with open(out / "history.jsonl", "w") as fh:
        for row in history.epochs:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    cfg.write(out)
    print(json.dumps({"best_epoch": history.best_epoch, "best_dev_hit_at_1": history.best_dev_hit,
                      "skipped_unanswerable": history.skipped_unanswerable}))
    return 0


def cmd_eval(cfg: RunConfig) -> int:
    _require(cfg, "data", "checkpoint")
    split = cfg.settings["split"]
    keep = cfg.settings["corrupt_keep"]
    if not 0 < keep <= 1:
        raise UsageError("--corrupt-keep must lie in (0, 1]")
    model = load_checkpoint(cfg.settings["checkpoint"])
    ds = load_dataset(_split_path(cfg.settings["data"], split), model.relations, model.tokens)
    if keep < 1:
        ds = corrupt_kg(ds, keep, cfg.settings["seed"])
    report = evaluate(model, ds)
    out = Path(cfg.settings["out"] or Path(cfg.settings["checkpoint"]).parent / f"eval-{split}")
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.jsonl", "w") as fh:
        for r in report.per_instance:
            fh.write(json.dumps(asdict(r), sort_keys=True) + "\n")
    (out / "summary.json").write_text(json.dumps(report.summary(), sort_keys=True) + "\n")
    cfg.write(out)
    print(json.dumps(report.summary()))
    return 0


def _parse_seeds(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in str(text).split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--seeds must be comma-separated integers, got {text!r}") from None
    if not seeds:
        raise UsageError("--seeds is empty")
    return seeds


def _data_tag(data: Path) -> str:
    h = hashlib.sha256()
    for name in ("relations.txt", "vocab.txt", "train.jsonl", "dev.jsonl", "test.jsonl"):
        path = data / name
        if path.is_file():
            h.update(name.encode())
            h.update(path.read_bytes())
    return h.hexdigest()[:16]


def cmd_protocol(cfg: RunConfig) -> int:
    _require(cfg, "name", "data", "out")
    name = cfg.settings["name"]
    if name not in PROTOCOLS:
        raise UsageError(f"unknown protocol {name!r}; choose from {', '.join(PROTOCOLS)}")
    mc, tc = cfg.section(ModelConfig), cfg.section(TrainConfig)
    seeds = _parse_seeds(cfg.settings["seeds"])
    if cfg.settings["jobs"] < 1:
        raise UsageError("--jobs must be >= 1")
    data = Path(cfg.settings["data"])
    train_ds = load_dataset(_split_path(data, "train"))
    datasets = {"train": train_ds}
    for split in ("dev", "test"):
        datasets[split] = load_dataset(_split_path(data, split), train_ds.relation_vocab,
                                       train_ds.token_vocab)
    out = _out_dir(cfg)
    result = run_protocol(name, datasets, mc, tc, seeds, results_path=out / "results.jsonl",
                          jobs=cfg.settings["jobs"], data_tag=_data_tag(data),
                          progress=lambda r: log.info("%s seed %d: test H@1 %.3f",
                                                      r["cell"], r["seed"], r["test_hit_at_1"]))
    (out / "summary.json").write_text(json.dumps(result.table, indent=1, sort_keys=True) + "\n")
    cfg.write(out)
    for row in result.table:
        print(json.dumps(row, sort_keys=True))
    return 0


def cmd_inspect(cfg: RunConfig) -> int:
    _require(cfg, "data", "instance", "node")
    data = Path(cfg.settings["data"])
    ds = load_dataset(_split_path(data, cfg.settings["split"]))
    by_id = {inst.id: inst for inst in ds.instances}
    if cfg.settings["instance"] not in by_id:
        raise DataError(f"unknown instance {cfg.settings['instance']!r}")
    inst = by_id[cfg.settings["instance"]]
    vocab = ds.relation_vocab
    inverse_edges = True
    if cfg.settings["checkpoint"]:
        model = load_checkpoint(cfg.settings["checkpoint"], vocab)
        ef, inverse_edges = model.ef_table, model.cfg.inverse_edges
    elif cfg.settings["ef_table"]:
        ef = EfTable.load(cfg.settings["ef_table"], vocab)
    else:
        train_ds = load_dataset(_split_path(data, "train"), vocab, ds.token_vocab)
        ef = entity_frequency(train_ds, vocab)
    if ef is None:
        raise DataError("checkpoint carries no EF table")
    graph = augment(inst, vocab, inverse_edges)
    node = cfg.settings["node"]
    if not 0 <= node < graph.num_nodes:
        raise DataError(f"unknown node {node} (instance has {graph.num_nodes} nodes)")
    w = inspect_weights(relation_frequency(graph), inverse_entity_frequency(ef), node)
    result = {
        "instance": inst.id,
        "node": node,
        "weights": sorted(([vocab.name(r), x] for r, x in w.weights.items()),
                          key=lambda p: (-p[1], p[0])),
        "negative": sorted(([vocab.name(r), x] for r, x in w.negative.items()),
                           key=lambda p: (p[1], p[0])),
        "ef_ranking": sorted(([vocab.name(r), int(c)] for r, c in enumerate(ef.ef)),
                             key=lambda p: (-p[1], p[0])),
    }
    if cfg.settings["out"]:
        out = _out_dir(cfg)
        (out / "inspect.json").write_text(json.dumps(result, indent=1) + "\n")
        cfg.write(out)
    print(json.dumps(result))
    return 0


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval,
            "protocol": cmd_protocol, "inspect": cmd_inspect}


# ---------------------------------------------------------------- argument parsing

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _model_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--layers", type=int, help="NuTrea layers (default 2)")
    g.add_argument("--subtree-depth", dest="subtree_depth", type=int, help="backup depth K (default 1)")
    g.add_argument("--lambda", dest="lam", type=float, help="context coefficient (default 1.0)")
    g.add_argument("--dim", type=int, help="hidden size (default 32)")
    g.add_argument("--num-expansion", dest="num_expansion", type=int)
    g.add_argument("--num-backup", dest="num_backup", type=int)
    g.add_argument("--no-backup", dest="use_backup", action="store_const", const=False)
    g.add_argument("--no-rfief", dest="use_rfief", action="store_const", const=False)
    g.add_argument("--position-embeddings", dest="use_position_embeddings",
                   action="store_const", const=True)
    g.add_argument("--inference-iterations", dest="inference_iterations", type=int,
                   help="default 2")
    g.add_argument("--no-inverse-edges", dest="inverse_edges", action="store_const", const=False)
    g.add_argument("--ief-numerator", dest="ief_numerator", choices=("corpus", "instance"))
    g.add_argument("--question-positions", dest="question_positions", type=int)


def _train_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--epochs", type=int)
    g.add_argument("--lr", dest="learning_rate", type=float, help="default 5e-4")
    g.add_argument("--lr-decay", dest="lr_decay", type=float, help="per epoch (default 0.99)")
    g.add_argument("--batch-size", dest="batch_size", type=int)
    g.add_argument("--eval-batch-size", dest="eval_batch_size", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="nutrea", description="NuTrea multi-hop KGQA experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def common(p, data=True):
        p.add_argument("--config", help="key = value settings file")
        p.add_argument("--seed", type=int, help=f"overridden by ${SEED_ENV}")
        p.add_argument("--out", help="output directory")
        if data:
            p.add_argument("--data", help="dataset directory")

    p = sub.add_parser("generate", help="write a synthetic train/dev/test dataset")
    common(p, data=False)
    p.add_argument("--hops", type=int)
    p.add_argument("--constraint-fraction", dest="constraint_fraction", type=float)
    p.add_argument("--nodes", dest="nodes_per_graph", type=int)
    p.add_argument("--relations", dest="num_relations", type=int)
    p.add_argument("--edge-factor", dest="edge_factor", type=float)
    p.add_argument("--unanswerable-fraction", dest="unanswerable_fraction", type=float)
    p.add_argument("--train-size", dest="train_size", type=int)
    p.add_argument("--dev-size", dest="dev_size", type=int)
    p.add_argument("--test-size", dest="test_size", type=int)
    p.add_argument("--force", action="store_const", const=True)

    p = sub.add_parser("train", help="train and save the best-dev checkpoint")
    common(p)
    p.add_argument("--ef-table", dest="ef_table", help="precomputed EF table JSON")
    _model_flags(p)
    _train_flags(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--split", choices=SPLITS)
    p.add_argument("--corrupt-keep", dest="corrupt_keep", type=float,
                   help="keep this fraction of KG triplets before evaluating")

    p = sub.add_parser("protocol", help="run an experiment grid over seeds")
    common(p)
    p.add_argument("name", nargs="?", choices=PROTOCOLS)
    p.add_argument("--seeds", help="comma-separated (default 0,1,2,3,4)")
    p.add_argument("--jobs", type=int, help="parallel grid cells")
    _model_flags(p)
    _train_flags(p)

    p = sub.add_parser("inspect", help="RF-IEF relation weights of one node")
    common(p)
    p.add_argument("--split", choices=SPLITS)
    p.add_argument("--instance")
    p.add_argument("--node", type=int)
    p.add_argument("--checkpoint", help="take the EF table from a checkpoint")
    p.add_argument("--ef-table", dest="ef_table")
    return parser


def main(argv: Optional[Sequence[str]] = None, env=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("nutrea: choose a command: " + " | ".join(COMMANDS))
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = resolve(args.command, args, env)
        return COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
