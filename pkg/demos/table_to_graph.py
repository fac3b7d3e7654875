"""
From a merged-cell table to a tabular graph
===========================================

Spans are resolved into an occupancy grid first; the graph is read off
that grid.
"""

import numpy as np

from tabgraph import Cell, Table, TableContext, build_graph, graph_stats, resolve_grid

# A header that spans two columns, and a row label that spans two rows.
rows = (
    (Cell("Item", row_span=2, is_header=True), Cell("Yearly aggregates", col_span=2,
                                                    is_header=True)),
    (Cell("2019", is_header=True), Cell("2020", is_header=True)),
    (Cell("Taxable wages"), Cell("50,000"), Cell("52,000")),
    (Cell("Dependent allowance", row_span=2), Cell("4,000"), Cell("4,100")),
    (Cell("8,000", col_span=2),),
)
table = Table("wages", rows, TableContext("Taxing wages", "Tax policy", ""))

###############################################################################
# Every grid slot belongs to exactly one cell.
grid = resolve_grid(table)
print(np.array(grid.occupancy))

###############################################################################
# One node per cell, then one per row and one per column.
graph = build_graph(table, grid)
print(graph_stats(graph).as_dict())

# Who does "Dependent allowance" talk to?
cell = 7
print([graph.nodes[d].kind.value for s, d in graph.edges if s == cell])
