"""Loss, metrics, optimisation and evaluation."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import tensor as T
from .data import Dataset
from .model import ModelConfig, NuTrea, PreparedInstance
from .rfief import EfTable, entity_frequency
from .tensor import Tensor

log = logging.getLogger(__name__)

LOG_FLOOR = 1e-12


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 5e-4
    lr_decay: float = 0.99
    epochs: int = 20
    batch_size: int = 32
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    eval_batch_size: int = 128

    def validate(self) -> "TrainConfig":
        if self.learning_rate <= 0 or not 0 < self.lr_decay <= 1:
            raise TrainingError("need learning_rate > 0 and 0 < lr_decay <= 1")
        if self.epochs < 0 or self.batch_size < 1:
            raise TrainingError("need epochs >= 0 and batch_size >= 1")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise TrainingError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d).validate()

    def lr_at(self, epoch: int) -> float:
        return self.learning_rate * self.lr_decay ** epoch


# ---------------------------------------------------------------- loss and metrics

def answer_target(num_nodes: int, answers: Iterable[int]) -> np.ndarray:
    p = np.zeros(num_nodes)
    answers = sorted(answers)
    p[answers] = 1.0 / len(answers)
    return p


def kl_loss(s: Tensor, answers) -> Tensor:
    """KL(uniform-over-answers || s)."""
    answers = set(answers)
    if not answers:
        raise TrainingError("kl_loss needs a nonempty answer set")
    target = answer_target(s.shape[0], answers)
    return _kl(s, target, 1)


def _kl(s: Tensor, target: np.ndarray, num_graphs: int) -> Tensor:
    support = target > 0
    const = float(np.sum(target[support] * np.log(target[support])))
    cross = (Tensor(target.astype(s.dtype)) * T.log(T.clamp_min(s, LOG_FLOOR))).sum()
    return (cross * -1.0 + const) * (1.0 / num_graphs)


def batch_kl_loss(s: Tensor, batch) -> Tensor:
    """Mean over graphs of the per-graph KL loss."""
    off = batch.graph.node_offset
    target = np.zeros(s.shape[0])
    for g, ans in enumerate(batch.answers):
        target[off[g]:off[g + 1]] = answer_target(off[g + 1] - off[g], ans)
    return _kl(s, target, batch.num_graphs)


def hit_at_1(s, answers) -> int:
    s = np.asarray(s.data if isinstance(s, Tensor) else s)
    return int(int(np.argmax(s)) in set(answers))  # argmax picks the lowest id on ties


def ranked_nodes(s: np.ndarray) -> np.ndarray:
    """Node ids by descending score, lowest id first among equal scores."""
    return np.lexsort((np.arange(len(s)), -s))


def f1_at_threshold(s, answers, threshold: float = 0.95) -> tuple[float, float, float, set]:
    s = np.asarray(s.data if isinstance(s, Tensor) else s, dtype=np.float64)
    answers = set(answers)
    predicted, total = set(), 0.0
    for v in ranked_nodes(s):
        predicted.add(int(v))
        total += s[v]
        if total >= threshold:
            break
    if not answers:
        return 0.0, 0.0, 0.0, predicted
    tp = len(predicted & answers)
    precision = tp / len(predicted)
    recall = tp / len(answers)
    f1 = 0.0 if tp == 0 else 2 * precision * recall / (precision + recall)
    return precision, recall, f1, predicted


@dataclass
class InstanceResult:
    id: str
    hit: int
    precision: float
    recall: float
    f1: float
    predicted: list
    unanswerable: bool = False


@dataclass
class EvalReport:
    hit_at_1: float
    f1: float
    per_instance: list

    def summary(self) -> dict:
        return {"hit_at_1": self.hit_at_1, "f1": self.f1, "count": len(self.per_instance)}


def evaluate(model: NuTrea, ds, batch_size: int = 128) -> EvalReport:
    prepared = _prepared(model, ds)
    results = []
    for start in range(0, len(prepared), batch_size):
        chunk = prepared[start:start + batch_size]
        for item, s in zip(chunk, model.scores(chunk)):
            ans = item.instance.answers
            p, r, f1, pred = f1_at_threshold(s, ans)
            results.append(InstanceResult(item.instance.id, hit_at_1(s, ans), p, r, f1,
                                          sorted(pred), unanswerable=not ans))
    n = max(len(results), 1)
    return EvalReport(math.fsum(r.hit for r in results) / n,
                      math.fsum(r.f1 for r in results) / n, results)


def _prepared(model: NuTrea, ds) -> list[PreparedInstance]:
    items = ds.instances if isinstance(ds, Dataset) else ds
    return [it if isinstance(it, PreparedInstance) else model.prepare(it) for it in items]


# ---------------------------------------------------------------- optimiser

class Adam:
    """Adam with bias correction; the learning rate is set per step by the caller."""

    def __init__(self, params: dict, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            update = (lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - update).astype(p.data.dtype)


# ---------------------------------------------------------------- training

@dataclass
class History:
    epochs: list = field(default_factory=list)
    best_epoch: int = -1
    best_dev_hit: float = -1.0
    skipped_unanswerable: int = 0


def train(train_ds: Dataset, dev_ds: Optional[Dataset], model_cfg: ModelConfig,
          train_cfg: TrainConfig, ef_table: Optional[EfTable] = None,
          progress: Optional[Callable[[dict], None]] = None) -> tuple[NuTrea, History]:
    """Train from a seeded init; returns the best-dev model and per-epoch history."""
    train_cfg.validate()
    if len(train_ds) == 0:
        raise TrainingError("empty training set")
    if ef_table is None:
        ef_table = entity_frequency(train_ds, train_ds.relation_vocab, model_cfg.inverse_edges)
    model = NuTrea(model_cfg, train_ds.relation_vocab, train_ds.token_vocab, ef_table,
                   seed=train_cfg.seed)
    prepared = [model.prepare(i) for i in train_ds.instances if i.answers]
    history = History(skipped_unanswerable=len(train_ds) - len(prepared))
    if not prepared:
        raise TrainingError("no training instance has an answer")
    dev_prepared = _prepared(model, dev_ds) if dev_ds is not None and len(dev_ds) else None
    opt = Adam(model.params, train_cfg.beta1, train_cfg.beta2, train_cfg.eps)
    rng = np.random.default_rng(train_cfg.seed)
    best = {k: p.data.copy() for k, p in model.params.items()}
    for epoch in range(train_cfg.epochs):
        started = time.perf_counter()
        lr = train_cfg.lr_at(epoch)
        order = rng.permutation(len(prepared))
        losses = []
        for b in range(0, len(order), train_cfg.batch_size):
            batch = model.batch([prepared[i] for i in order[b:b + train_cfg.batch_size]])
            opt.zero_grad()
            try:
                loss = batch_kl_loss(model.forward(batch), batch)
                T.backward(loss)
            except FloatingPointError as exc:
                raise TrainingError(f"training diverged at epoch {epoch}, batch {b}: {exc}") from None
            if not math.isfinite(loss.item()):
                raise TrainingError(f"training diverged at epoch {epoch}: loss {loss.item()}")
            opt.step(lr)
            losses.append(loss.item() * batch.num_graphs)
        row = {"epoch": epoch, "lr": lr, "train_loss": math.fsum(losses) / len(prepared)}
        if dev_prepared is not None:
            rep = evaluate(model, dev_prepared, train_cfg.eval_batch_size)
            row.update(dev_hit_at_1=rep.hit_at_1, dev_f1=rep.f1)
            if rep.hit_at_1 > history.best_dev_hit:
                history.best_dev_hit, history.best_epoch = rep.hit_at_1, epoch
                best = {k: p.data.copy() for k, p in model.params.items()}
        else:
            history.best_epoch = epoch
            best = {k: p.data.copy() for k, p in model.params.items()}
        history.epochs.append(row)
        log.info("epoch %d: %s (%.1fs)", epoch, row, time.perf_counter() - started)
        if progress is not None:
            progress(row)
    for k, p in model.params.items():
        p.data = best[k]
    return model, history


def run_protocol(name: str, *args, **kwargs):
    """Run an experiment grid; see :func:`nutrea.protocol.run_protocol`."""
    from .protocol import run_protocol as _run
    return _run(name, *args, **kwargs)
