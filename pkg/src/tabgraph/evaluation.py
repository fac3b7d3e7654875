"""BM25 baseline, TREC run files and ranking metrics."""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .encoder import tokenize
from .table import Table

CUTOFFS = (5, 10, 15, 20)


def table_text(table: Table) -> str:
    """All cell texts followed by the context fields."""
    parts = [c.text for c in table.cells] + list(table.context.fields())
    return " ".join(p for p in parts if p)


class Bm25Index:
    """Okapi BM25 with ``idf = ln((N - df + 0.5) / (df + 0.5) + 1)``."""

    def __init__(self, docs: dict[str, str], k1=1.2, b=0.75):
        self.k1, self.b = k1, b
        self.tf = {d: Counter(tokenize(text)) for d, text in docs.items()}
        self.length = {d: sum(tf.values()) for d, tf in self.tf.items()}
        self.n_docs = len(self.tf)
        self.avgdl = (sum(self.length.values()) / self.n_docs) if self.n_docs else 0.0
        self.df = Counter()
        for tf in self.tf.values():
            self.df.update(tf.keys())

    @classmethod
    def from_tables(cls, tables, **kw):
        tables = tables.values() if isinstance(tables, dict) else tables
        return cls({t.id: table_text(t) for t in tables}, **kw)

    def idf(self, term: str) -> float:
        df = self.df.get(term, 0)
        return math.log((self.n_docs - df + 0.5) / (df + 0.5) + 1.0)

    def score(self, query: str, doc_id: str) -> float:
        tf = self.tf[doc_id]
        norm = self.k1 * (1 - self.b + self.b * self.length[doc_id] / self.avgdl) \
            if self.avgdl else self.k1
        s = 0.0
        for term in tokenize(query):
            f = tf.get(term, 0)
            if f:
                s += self.idf(term) * f * (self.k1 + 1) / (f + norm)
        return s


def rank(scores: dict[str, float]) -> list[tuple[str, float]]:
    """Sort by score descending, ties by id ascending."""
    return sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))


def bm25_rank(query: str, table_ids, index: Bm25Index) -> list[tuple[str, float]]:
    return rank({t: index.score(query, t) for t in table_ids})


# -- metrics -------------------------------------------------------------------

def dcg(grades, k: int, gain="exp") -> float:
    g = np.asarray(grades[:k], dtype=np.float64)
    if gain == "exp":
        g = 2.0 ** g - 1.0
    return float(np.sum(g / np.log2(np.arange(2, len(g) + 2))))


def ndcg_at_k(ranked_grades, ideal_grades, k: int, gain="exp") -> float:
    if k <= 0:
        raise ValueError(f"cutoff must be positive, got {k}")
    ideal = dcg(sorted(ideal_grades, reverse=True), k, gain)
    if ideal == 0:
        return 0.0
    return dcg(list(ranked_grades), k, gain) / ideal


def average_precision(ranked_grades, n_relevant=None) -> float:
    """AP with binary relevance (grade >= 1).

    ``n_relevant`` defaults to the relevant items present in the ranking;
    pass the judged total to penalize relevant tables that were not ranked.
    """
    rel = [g >= 1 for g in ranked_grades]
    total = sum(rel) if n_relevant is None else n_relevant
    if total == 0:
        return 0.0
    hits, acc = 0, 0.0
    for i, r in enumerate(rel, 1):
        if r:
            hits += 1
            acc += hits / i
    return acc / total


def p_at_1(ranked_grades) -> float:
    return 1.0 if len(ranked_grades) and ranked_grades[0] >= 1 else 0.0


def mean_average_precision(rankings) -> float:
    aps = [average_precision(g) for g in rankings if any(x >= 1 for x in g)]
    return float(np.mean(aps)) if aps else 0.0


@dataclass
class EvalReport:
    per_query: dict[str, dict[str, float]] = field(default_factory=dict)
    mean: dict[str, float] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({"mean": self.mean, "per_query": self.per_query},
                          indent=2, sort_keys=True)

    def to_text(self) -> str:
        keys = list(self.mean)
        width = max([len("query")] + [len(q) for q in self.per_query])
        head = "query".ljust(width) + "".join(f"{k:>10}" for k in keys)
        lines = [head, "-" * len(head)]
        for q, vals in self.per_query.items():
            lines.append(q.ljust(width) + "".join(f"{vals[k]:>10.4f}" for k in keys))
        lines.append("-" * len(head))
        lines.append("mean".ljust(width) + "".join(f"{self.mean[k]:>10.4f}" for k in keys))
        return "\n".join(lines)


def evaluate_run(run: dict[str, list[tuple[str, float]]], qrels: dict[str, dict[str, int]],
                 cutoffs=CUTOFFS, gain="exp") -> EvalReport:
    """Score a run against graded judgments.

    Unjudged tables count as grade 0. AP divides by the number of judged
    relevant tables, as TREC tools do; MAP averages over queries with at
    least one relevant judgment.
    """
    report = EvalReport()
    for qid in sorted(qrels):
        judged = qrels[qid]
        ranked = [judged.get(t, 0) for t, _ in run.get(qid, [])]
        n_rel = sum(g >= 1 for g in judged.values())
        vals = {f"ndcg@{k}": ndcg_at_k(ranked, list(judged.values()), k, gain)
                for k in cutoffs}
        vals["map"] = average_precision(ranked, n_rel)
        vals["p@1"] = p_at_1(ranked)
        vals["_has_rel"] = float(n_rel > 0)
        report.per_query[qid] = vals
    keys = [f"ndcg@{k}" for k in cutoffs] + ["map", "p@1"]
    with_rel = [v for v in report.per_query.values() if v["_has_rel"]]
    for k in keys:
        pool = with_rel if k == "map" else list(report.per_query.values())
        report.mean[k] = float(np.mean([v[k] for v in pool])) if pool else 0.0
    for v in report.per_query.values():
        del v["_has_rel"]
    return report


def qrels_from_instances(instances) -> dict[str, dict[str, int]]:
    return {i.query_id: dict(i.candidates) for i in instances}


# -- cross-validation -----------------------------------------------------------

def kfold_split(query_ids, k=5, seed=0) -> list[tuple[list, list]]:
    """Seeded shuffle, then contiguous near-equal test folds."""
    ids = list(query_ids)
    if len(ids) < k:
        raise ValueError(f"{len(ids)} queries cannot fill {k} folds")
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    folds = np.array_split(np.arange(len(ids)), k)
    out = []
    for f in folds:
        test = [shuffled[i] for i in f]
        held = set(f.tolist())
        train = [shuffled[i] for i in range(len(ids)) if i not in held]
        out.append((train, test))
    return out


# -- TREC run files -------------------------------------------------------------

class RunFormatError(ValueError):
    pass


def write_run(run: dict[str, list[tuple[str, float]]], path, tag="tabgraph") -> None:
    """``query_id Q0 table_id rank score tag``; rows must already be ranked."""
    with open(path, "w", encoding="utf-8") as f:
        for qid in sorted(run):
            for r, (tid, s) in enumerate(run[qid], 1):
                f.write(f"{qid} Q0 {tid} {r} {s:.9g} {tag}\n")


def read_run(path) -> dict[str, list[tuple[str, float]]]:
    rows: dict[str, list[tuple[int, str, float]]] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 6:
                raise RunFormatError(f"{path}:{lineno}: expected 6 fields, got {len(parts)}")
            try:
                r, s = int(parts[3]), float(parts[4])
            except ValueError:
                raise RunFormatError(f"{path}:{lineno}: bad rank or score") from None
            rows.setdefault(parts[0], []).append((r, parts[2], s))
    return {q: [(t, s) for _, t, s in sorted(v)] for q, v in rows.items()}
