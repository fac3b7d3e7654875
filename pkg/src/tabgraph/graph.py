"""Multi-granular tabular graphs: one node per cell, row and column."""
from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .table import GridIndex, Table, resolve_grid


class NodeKind(str, Enum):
    CELL = "cell"
    ROW = "row"
    COL = "col"


@dataclass(frozen=True)
class Node:
    kind: NodeKind
    index: int  # cell id, row index or column index depending on kind
    text: str


@dataclass(frozen=True)
class TabularGraph:
    """Directed graph over cell, row and column nodes.

    Nodes are ordered cells first, then rows, then columns. ``edges`` is an
    (E, 2) int array of (src, dst) pairs; messages flow src -> dst.
    """
    nodes: tuple[Node, ...]
    edges: np.ndarray
    origin: str
    grid: GridIndex

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_cells(self) -> int:
        return len(self.grid.cells)

    def row_node(self, r: int) -> int:
        return self.n_cells + r

    def col_node(self, c: int) -> int:
        return self.n_cells + self.grid.n_rows + c

    def edge_set(self) -> set[tuple[int, int]]:
        return {(int(s), int(d)) for s, d in self.edges}

    def members(self, node: int) -> list[int]:
        """Constituent cell ids of a ROW/COL node, each listed once."""
        kind = self.nodes[node].kind
        if kind is NodeKind.CELL:
            return [self.nodes[node].index]
        return sorted(int(s) for s, d in self.edges if d == node)

    def to_dict(self) -> dict:
        return {
            "origin": self.origin,
            "nodes": [{"kind": n.kind.value, "index": n.index, "text": n.text}
                      for n in self.nodes],
            "edges": self.edges.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False)


def adjacent_cells(grid: GridIndex, cell_id: int) -> set[int]:
    """Cells whose rectangles share an edge segment of positive length."""
    r0, c0, r1, c1 = grid.rect(cell_id)
    out = set()
    for other in range(len(grid.cells)):
        if other == cell_id:
            continue
        s0, d0, s1, d1 = grid.rect(other)
        rows_overlap = max(r0, s0) < min(r1, s1)
        cols_overlap = max(c0, d0) < min(c1, d1)
        if (rows_overlap and (c1 == d0 or d1 == c0)) or \
                (cols_overlap and (r1 == s0 or s1 == r0)):
            out.add(other)
    return out


def build_graph(table: Table, grid: GridIndex | None = None) -> TabularGraph:
    if grid is None:
        grid = resolve_grid(table)
    n_cells = len(grid.cells)
    nodes = [Node(NodeKind.CELL, i, c.text) for i, c in enumerate(grid.cells)]

    def span_text(ids):
        return " ".join(grid.cells[i].text for i in ids if grid.cells[i].text)

    # grid order, each cell once
    for r in range(grid.n_rows):
        nodes.append(Node(NodeKind.ROW, r, span_text(dict.fromkeys(grid.occupancy[r].tolist()))))
    for c in range(grid.n_cols):
        nodes.append(Node(NodeKind.COL, c, span_text(dict.fromkeys(grid.occupancy[:, c].tolist()))))

    edges = []
    for i in range(n_cells):
        for j in sorted(adjacent_cells(grid, i)):
            edges.append((i, j))
    row_base, col_base = n_cells, n_cells + grid.n_rows
    for i in range(n_cells):
        r0, c0, r1, c1 = grid.rect(i)
        edges.extend((i, row_base + r) for r in range(r0, r1))
        edges.extend((i, col_base + c) for c in range(c0, c1))
    edge_arr = np.array(edges, dtype=np.int64).reshape(-1, 2)
    edge_arr.setflags(write=False)
    return TabularGraph(tuple(nodes), edge_arr, table.id, grid)


@dataclass(frozen=True)
class GraphStats:
    n_cell: int
    n_row: int
    n_col: int
    n_edges: int
    n_merged: int

    def as_dict(self) -> dict:
        return {"CELL": self.n_cell, "ROW": self.n_row, "COL": self.n_col,
                "edges": self.n_edges, "merged": self.n_merged}


def graph_stats(graph: TabularGraph) -> GraphStats:
    counts = {k: 0 for k in NodeKind}
    for n in graph.nodes:
        counts[n.kind] += 1
    merged = sum(c.is_merged for c in graph.grid.cells)
    return GraphStats(counts[NodeKind.CELL], counts[NodeKind.ROW], counts[NodeKind.COL],
                      len(graph.edges), merged)
