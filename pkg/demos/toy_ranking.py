"""
Ranking a toy corpus
====================

BM25 against a briefly trained ranker on the synthetic keyword corpus, then a
look at which nodes won the pooled match dimensions.
"""

import numpy as np

from tabgraph import (Bm25Index, GTConfig, MatchConfig, TableRanker, TrainConfig, bm25_rank,
                      evaluate_run, make_toy_corpus, train)

data = make_toy_corpus(n_tables=24, n_queries=12, dim=48, seed=3)
qrels = {i.query_id: dict(i.candidates) for i in data.instances}

###############################################################################
# The queries share a keyword with their table, so BM25 is close to perfect.
index = Bm25Index.from_tables(data.tables)
run = {i.query_id: bm25_rank(i.query_text, i.table_ids, index) for i in data.instances}
print("BM25 ", evaluate_run(run, qrels).mean)

###############################################################################
# A smaller-than-default model learns the same thing in a few seconds.
model = TableRanker(data.embeddings, GTConfig(layers=2, heads=4, hidden=48),
                    MatchConfig(match_dim=64, context_dim=64), dtype=np.float32)
train(model, data.instances, data.tables,
      TrainConfig(objective="nll", epochs=30, batch_size=4, warmup_steps=10, lr=1e-3))
print("model", evaluate_run(model.rank_instances(data.instances, data.tables), qrels).mean)

###############################################################################
# Attribution: how many pooled dimensions each node won for the gold table.
inst = data.instances[0]
gold = inst.table_ids[inst.grades.index(1)]
graph, freq = model.attribution(inst.query_text, data.tables[gold])
top = np.argsort(-freq)[:3]
print(inst.query_text, "->", [(int(k), graph.nodes[k].kind.value, int(freq[k])) for k in top])
print("keyword cell:", [c.text for c in graph.grid.cells].index(data.keywords[gold]))
