"""Ranking objectives, graph-context pre-training and the training loop."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .table import Table, TableContext

log = logging.getLogger(__name__)


class ObjectiveError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


class PretrainingDisabled(RuntimeError):
    pass


@dataclass
class TrainConfig:
    objective: str = "mse"
    lr: float = 1e-4
    epochs: int = 5
    batch_size: int = 16
    warmup_steps: int = 100
    dropout: float = 0.1
    seed: int = 0
    negatives: int = 9
    pretrain: bool = False
    pretrain_epochs: int = 20
    pretrain_batch: int = 16
    pretrain_lr: float = 1e-4

    def __post_init__(self):
        if self.objective not in ("mse", "nll"):
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")
        if self.batch_size < 1 or self.pretrain_batch < 1:
            raise ValueError("batch sizes must be >= 1")


# -- losses --------------------------------------------------------------------

def mse_loss(scores: Tensor, labels, groups) -> Tensor:
    """Mean over queries of the mean squared error over each query's tables.

    ``groups[k]`` names the query that score ``k`` belongs to.
    """
    scores = ag.as_tensor(scores)
    labels = np.asarray(labels, dtype=scores.dtype)
    groups = np.asarray(groups)
    if len(groups) == 0:
        log.warning("mse_loss called without candidates")
        return ag.as_tensor(np.zeros((), dtype=scores.dtype))
    _, inverse, counts = np.unique(groups, return_inverse=True, return_counts=True)
    weights = (1.0 / (len(counts) * counts[inverse])).astype(scores.dtype)
    diff = scores - labels
    return ag.sum(diff * diff * weights)


def nll_loss(scores: Tensor, groups, gold) -> Tensor:
    """Mean negative log-softmax probability of each query's gold table.

    ``gold`` maps each distinct group id to the position (within ``scores``)
    of its only relevant table.
    """
    scores = ag.as_tensor(scores)
    groups = np.asarray(groups)
    total = None
    qids = list(dict.fromkeys(groups.tolist()))
    for q in qids:
        idx = np.flatnonzero(groups == q)
        pos = int(np.flatnonzero(idx == gold[q])[0])
        term = ag.log_softmax(scores[idx])[pos]
        total = term if total is None else total + term
    return ag.scale(total, -1.0 / len(qids))


def gold_index(grades) -> int:
    relevant = [k for k, g in enumerate(grades) if g >= 1]
    if len(relevant) != 1:
        raise ObjectiveError(
            f"NLL needs exactly one relevant table per query, found {len(relevant)}; "
            "use the MSE objective for multi-grade judgments")
    return relevant[0]


# -- schedule ------------------------------------------------------------------

def lr_schedule(step: int, base: float, warmup: int, total: int) -> float:
    """Linear warmup to ``base`` then linear decay to zero at ``total``."""
    if step < 1:
        raise ValueError("steps are 1-based")
    if warmup and step <= warmup:
        return base * step / warmup
    if total <= warmup:
        return base
    return base * max(0.0, (total - step) / (total - warmup))


# -- pre-training ------------------------------------------------------------------

@dataclass(frozen=True)
class PretrainSample:
    table_id: str
    positive: TableContext
    negative: TableContext


def sample_negative_context(corpus, table_id: str, rng) -> TableContext:
    """Context of a uniformly drawn different table with non-empty context."""
    tables = list(corpus.values()) if isinstance(corpus, dict) else list(corpus)
    others = [t for t in tables if t.id != table_id and not t.context.is_empty()]
    if not others:
        raise PretrainingDisabled("need at least two tables with context to pre-train")
    return others[int(rng.integers(len(others)))].context


def pretrain_samples(tables, rng) -> list[PretrainSample]:
    eligible = [t for t in tables if not t.context.is_empty()]
    if len(eligible) < 2:
        raise PretrainingDisabled(
            f"only {len(eligible)} table(s) carry context; pre-training needs 2")
    return [PretrainSample(t.id, t.context, sample_negative_context(eligible, t.id, rng))
            for t in eligible]


def pretrain_step(model, samples, tables_by_id, lr: float, step: int) -> float:
    """One MSE update pushing s(T, c) to 1 and s(T, c') to 0 (graph branch only)."""
    tables = [tables_by_id[s.table_id] for s in samples]
    queries, pairs, targets = [], [], []
    for k, s in enumerate(samples):
        queries += [s.positive.text(), s.negative.text()]
        pairs += [(2 * k, k), (2 * k + 1, k)]
        targets += [1.0, 0.0]
    out = model.forward(queries, tables, pairs, training=True, head="pretrain")
    diff = out.scores - np.asarray(targets, dtype=model.store.dtype)
    loss = ag.mean(diff * diff)
    if not np.isfinite(loss.data):
        raise TrainingError(f"non-finite pre-training loss at step {step}")
    ag.backward(loss, model.store)
    ag.adam_step(model.store, lr, step=step, names=model.pretrain_names())
    return float(loss.data)


def pretrain(model, tables, config: TrainConfig, log_path=None) -> list[float]:
    """Graph-context matching; returns the mean loss of each epoch."""
    tables = list(tables.values()) if isinstance(tables, dict) else list(tables)
    by_id = {t.id: t for t in tables}
    rng = np.random.default_rng([config.seed, 2])
    model.store.reset_optimizer()
    history = []
    step = 0
    with _StepLog(log_path, {"phase": "pretrain", "epochs": config.pretrain_epochs,
                             "batch_size": config.pretrain_batch, "seed": config.seed}) as slog:
        for epoch in range(1, config.pretrain_epochs + 1):
            samples = pretrain_samples(tables, rng)
            order = rng.permutation(len(samples))
            losses = []
            for b in range(0, len(order), config.pretrain_batch):
                step += 1
                batch = [samples[i] for i in order[b:b + config.pretrain_batch]]
                loss = pretrain_step(model, batch, by_id, config.pretrain_lr, step)
                losses.append(loss)
                slog.write(epoch=epoch, step=step, lr=config.pretrain_lr, loss=loss)
            history.append(float(np.mean(losses)))
            log.info("pretrain epoch %d loss %.5f", epoch, history[-1])
    model.store.reset_optimizer()
    return history


# -- main training ---------------------------------------------------------------

class _StepLog:
    def __init__(self, path, header):
        self.path = path
        self.header = header
        self.f = None

    def __enter__(self):
        if self.path is not None:
            self.f = open(self.path, "w", encoding="utf-8")
            self.f.write(json.dumps(self.header, sort_keys=True) + "\n")
        return self

    def write(self, **rec):
        if self.f is not None:
            self.f.write(json.dumps(rec, sort_keys=True) + "\n")

    def __exit__(self, *exc):
        if self.f is not None:
            self.f.close()


def _batches(n, size, rng):
    order = rng.permutation(n)
    return [order[i:i + size] for i in range(0, n, size)]


def train(model, instances, corpus: dict[str, Table], config: TrainConfig,
          checkpoint_dir=None, log_path=None, on_epoch=None) -> list[float]:
    """Fit ``model`` on ``instances``; returns the mean loss of each epoch.

    ``on_epoch(epoch, model)`` is called after every epoch, e.g. for logging
    evaluation metrics.
    """
    rng = np.random.default_rng([config.seed, 3])
    instances = [i for i in instances if i.candidates]
    if config.objective == "nll":
        for inst in instances:
            gold_index(inst.grades)
        units = list(range(len(instances)))
    else:
        units = [(qi, k) for qi, inst in enumerate(instances)
                 for k in range(len(inst.candidates))]
    n_batches = math.ceil(len(units) / config.batch_size) if units else 0
    total = config.epochs * n_batches
    names = model.finetune_names()
    all_ids = sorted(corpus)
    history = []
    step = 0
    header = {"phase": "train", "objective": config.objective, "epochs": config.epochs,
              "batch_size": config.batch_size, "warmup_steps": config.warmup_steps,
              "lr": config.lr, "seed": config.seed}
    with _StepLog(log_path, header) as slog:
        for epoch in range(1, config.epochs + 1):
            losses = []
            for batch in _batches(len(units), config.batch_size, rng):
                step += 1
                lr = lr_schedule(step, config.lr, config.warmup_steps, total)
                if config.objective == "nll":
                    loss = _nll_batch(model, [instances[u] for u in batch], corpus,
                                      all_ids, config.negatives, rng)
                else:
                    loss = _mse_batch(model, [units[u] for u in batch], instances, corpus)
                if not np.isfinite(loss.data):
                    raise TrainingError(f"non-finite loss {float(loss.data)} in epoch "
                                        f"{epoch}, batch step {step}")
                ag.backward(loss, model.store)
                ag.adam_step(model.store, lr, step=step, names=names)
                losses.append(float(loss.data))
                slog.write(epoch=epoch, step=step, lr=lr, loss=losses[-1])
            history.append(float(np.mean(losses)) if losses else 0.0)
            log.info("epoch %d loss %.5f", epoch, history[-1])
            if checkpoint_dir is not None:
                model.save(Path(checkpoint_dir) / f"epoch{epoch:03d}.ckpt",
                           {"epoch": epoch, "train_seed": config.seed})
            if on_epoch is not None:
                on_epoch(epoch, model)
    return history


def _mse_batch(model, units, instances, corpus):
    q_index: dict[int, int] = {}
    t_index: dict[str, int] = {}
    pairs, labels = [], []
    for qi, k in units:
        tid, grade = instances[qi].candidates[k]
        q = q_index.setdefault(qi, len(q_index))
        t = t_index.setdefault(tid, len(t_index))
        pairs.append((q, t))
        labels.append(grade)
    queries = [instances[qi].query_text for qi in q_index]
    tables = [corpus[tid] for tid in t_index]
    out = model.forward(queries, tables, pairs, training=True)
    return mse_loss(out.scores, labels, [p[0] for p in pairs])


def _nll_batch(model, batch, corpus, all_ids, negatives, rng):
    t_index: dict[str, int] = {}
    pairs, gold = [], {}
    for q, inst in enumerate(batch):
        cands = inst.table_ids
        g = gold_index(inst.grades)
        if len(cands) == 1:
            pool = [t for t in all_ids if t != cands[0]]
            take = min(negatives, len(pool))
            cands = cands + [pool[i] for i in rng.choice(len(pool), take, replace=False)]
        gold[q] = len(pairs) + g
        for tid in cands:
            pairs.append((q, t_index.setdefault(tid, len(t_index))))
    tables = [corpus[tid] for tid in t_index]
    out = model.forward([i.query_text for i in batch], tables, pairs, training=True)
    return nll_loss(out.scores, [p[0] for p in pairs], gold)
