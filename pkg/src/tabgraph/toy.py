"""A synthetic keyword corpus for smoke tests and demos.

Every table carries one distinctive keyword cell; each query names one
table's keyword plus a filler word. Token vectors are random Gaussians.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .encoder import EmbeddingTable
from .table import (Cell, RetrievalInstance, Table, TableContext, write_corpus,
                    write_qrels, write_queries)

FILLER = ("total year value rank name city count score team season date price "
          "area people number group type level source note amount rate share "
          "country region index list record result summary data report").split()
_SYLLABLES = "ba ko mi ru te sa no vi la ze po hu".split()


def keywords(n: int, rng) -> list[str]:
    out: list[str] = []
    while len(out) < n:
        w = "".join(rng.choice(_SYLLABLES, size=3))
        if w not in out:
            out.append(w)
    return out


@dataclass
class ToyData:
    tables: dict[str, Table]
    instances: list[RetrievalInstance]
    embeddings: EmbeddingTable
    keywords: dict[str, str]  # table id -> keyword


def _filler(rng, k=1):
    return " ".join(rng.choice(FILLER, size=k))


def _body_text(rng):
    return _filler(rng) if rng.random() < 0.5 else str(int(rng.integers(1, 100)))


def _layout(rng, keyword: str, merged: bool) -> list[list[Cell]]:
    n_rows = int(rng.integers(3, 5))
    n_cols = int(rng.integers(2, 4))
    grid = [[Cell(_body_text(rng)) for _ in range(n_cols)] for _ in range(n_rows)]
    grid[0] = [Cell(_filler(rng), is_header=True) for _ in range(n_cols)]
    kr, kc = int(rng.integers(1, n_rows)), int(rng.integers(0, n_cols))
    grid[kr][kc] = Cell(keyword)
    if not merged:
        return grid
    if rng.random() < 0.5:
        # header spanning all columns on top of the plain header row
        return [[Cell(_filler(rng, 2), col_span=n_cols, is_header=True)]] + grid
    # first column merged over the first two body rows
    if kr == 2 and kc == 0:
        kr = 1
        grid[1][0], grid[2][0] = Cell(keyword), Cell(_body_text(rng))
    rows = [list(r) for r in grid]
    rows[1][0] = Cell(rows[1][0].text, row_span=2)
    del rows[2][0]
    return rows


def make_toy_corpus(n_tables=64, n_queries=32, dim=300, seed=0,
                    keyword_captions=False) -> ToyData:
    """Build tables, queries judged against the whole corpus, and embeddings.

    With ``keyword_captions`` each caption mentions the table's keyword;
    otherwise captions are uninformative filler.
    """
    rng = np.random.default_rng(seed)
    kws = keywords(n_tables, rng)
    tables = {}
    by_table = {}
    for i, kw in enumerate(kws):
        tid = f"t{i:03d}"
        rows = _layout(rng, kw, merged=bool(i % 2))
        caption = f"{kw} {_filler(rng)}" if keyword_captions else _filler(rng, 2)
        ctx = TableContext(caption, f"{_filler(rng)} list", "")
        tables[tid] = Table(tid, tuple(tuple(r) for r in rows), ctx)
        by_table[tid] = kw
    ids = sorted(tables)
    chosen = sorted(rng.choice(n_tables, size=n_queries, replace=False).tolist())
    instances = []
    for qn, ti in enumerate(chosen):
        tid = ids[ti]
        text = f"{by_table[tid]} {_filler(rng)}"
        cands = tuple((t, int(t == tid)) for t in ids)
        instances.append(RetrievalInstance(f"q{qn:02d}", text, cands))
    vocab = list(FILLER) + kws + [str(n) for n in range(1, 100)]
    vec_rng = np.random.default_rng([seed, 7])
    vectors = vec_rng.normal(size=(len(vocab), dim))
    emb = EmbeddingTable({w: i for i, w in enumerate(vocab)}, vectors)
    return ToyData(tables, instances, emb, by_table)


def write_toy(data: ToyData, out) -> dict[str, Path]:
    """Write corpus, queries, qrels and embeddings files under ``out``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"corpus": out / "corpus.jsonl", "queries": out / "queries.tsv",
             "qrels": out / "qrels.txt", "embeddings": out / "embeddings.txt"}
    write_corpus(data.tables.values(), paths["corpus"])
    write_queries(data.instances, paths["queries"])
    write_qrels(data.instances, paths["qrels"])
    data.embeddings.save(paths["embeddings"])
    return paths
