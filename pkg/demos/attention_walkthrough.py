"""
Attention over a tabular graph
==============================

A small encoder with random weights, inspected layer by layer.
"""

import numpy as np

from tabgraph import GraphBatch, GTConfig, ParameterStore, build_graph, encode_graph
from tabgraph.autograd import Tensor
from tabgraph.encoder import attention_scores, init_encoder_params
from tabgraph.table import Cell, Table

config = GTConfig(layers=2, heads=2, hidden=8, dropout=0.0)
store = ParameterStore()
init_encoder_params(store, config, np.random.default_rng(0))

table = Table("strip", ((Cell("a"), Cell("b"), Cell("c")), (Cell("d"), Cell("e"), Cell("f"))))
graph = build_graph(table)
X = np.random.default_rng(1).normal(size=(graph.n_nodes, 8))
batch = GraphBatch([graph], [X])

###############################################################################
# Each node's attention weights over its neighbourhood (self included) sum to one.
alpha = attention_scores(Tensor(X), batch, store, 0, config).data
sums = np.zeros((graph.n_nodes, config.heads))
np.add.at(sums, batch.dst, alpha)
print("row sums:", np.round(sums.ravel(), 12))

###############################################################################
# Row and column nodes only receive messages, so changing one never reaches a cell.
base = encode_graph(batch, store, config).data
X2 = X.copy()
X2[graph.row_node(0)] += 10.0
moved = encode_graph(GraphBatch([graph], [X2]), store, config).data
print("cell drift:", np.abs(moved[:graph.n_cells] - base[:graph.n_cells]).max())
print("row drift: ", np.abs(moved[graph.row_node(0)] - base[graph.row_node(0)]).max())
