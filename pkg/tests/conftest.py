import numpy as np
import pytest

from tabgraph.table import Cell, Table, TableContext


def make_table(rows, tid="t", caption="", page="", section=""):
    """Rows of strings or (text, row_span, col_span) tuples."""
    out = []
    for row in rows:
        cells = []
        for c in row:
            if isinstance(c, str):
                cells.append(Cell(c))
            else:
                cells.append(Cell(c[0], c[1], c[2]))
        out.append(tuple(cells))
    return Table(tid, tuple(out), TableContext(caption, page, section))


def wages_table():
    """Five grid rows by three columns with two vertical and two horizontal merges."""
    return make_table([
        [("Item", 2, 1), ("Yearly aggregates", 1, 2)],
        ["2019", "2020"],
        ["Taxable wages", "50,000", "52,000"],
        [("Dependent allowance", 2, 1), "4,000", "4,100"],
        [("8,000", 1, 2)],
    ], tid="wages", caption="Taxing wages", page="Tax policy")


def random_layout(rng, max_rows=6, max_cols=6, max_span=3):
    """Random span-consistent layout as (cells, occupancy).

    Rectangles are dropped on free slots in row-major order, which is the
    same order a first-fit reader will place them in.
    """
    n = int(rng.integers(1, max_rows + 1))
    m = int(rng.integers(1, max_cols + 1))
    occ = -np.ones((n, m), dtype=int)
    cells = []  # (row, row_span, col_span)
    for r in range(n):
        for c in range(m):
            if occ[r, c] >= 0:
                continue
            rs = int(rng.integers(1, min(max_span, n - r) + 1))
            cs = int(rng.integers(1, min(max_span, m - c) + 1))
            while (occ[r:r + rs, c:c + cs] >= 0).any():
                if cs > 1:
                    cs -= 1
                else:
                    rs -= 1
            occ[r:r + rs, c:c + cs] = len(cells)
            cells.append((r, rs, cs))
    return cells, occ


def random_table(rng, tid="rand", **kw):
    """Random span-consistent Table plus the occupancy it was drawn from.

    Layouts with a grid row that holds no cell origin are redrawn, since a
    table row cannot be empty.
    """
    while True:
        cells, occ = random_layout(rng, **kw)
        rows = [[] for _ in range(occ.shape[0])]
        for k, (r, rs, cs) in enumerate(cells):
            rows[r].append(Cell(f"c{k}", rs, cs))
        if all(rows):
            return Table(tid, tuple(tuple(r) for r in rows)), occ


@pytest.fixture
def wages():
    return wages_table()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def central_diff(f, x: np.ndarray, idx, h=1e-6) -> float:
    """Central finite difference of scalar ``f()`` w.r.t. ``x[idx]`` (in place)."""
    old = x[idx]
    x[idx] = old + h
    up = f()
    x[idx] = old - h
    down = f()
    x[idx] = old
    return (up - down) / (2 * h)


def rel_err(a, n, floor=1e-6) -> float:
    """Relative error with a floor at finite-difference noise level."""
    return abs(a - n) / max(abs(a), abs(n), floor)


# acceptance lines collected by test_acceptance.py, echoed after the run
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
