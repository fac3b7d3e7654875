"""Node features from static word embeddings and the tabular Graph Transformer."""
from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import ParameterStore, Tensor, xavier_init
from .graph import TabularGraph

_TOKEN = re.compile(r"\w+", re.UNICODE)


def tokenize(text: str) -> list[str]:
    """Lowercase word tokens; punctuation splits, digits are kept."""
    return _TOKEN.findall(text.lower())


class EmbeddingTable:
    """Static token vectors; out-of-vocabulary tokens are ignored."""

    oov = "ignore"

    def __init__(self, vocab: dict[str, int], vectors: np.ndarray):
        vectors = np.asarray(vectors)
        if vectors.ndim != 2 or len(vocab) != vectors.shape[0]:
            raise ValueError("vocab size and vector matrix disagree")
        self.vocab = vocab
        self.vectors = vectors

    @classmethod
    def from_dict(cls, mapping: dict[str, np.ndarray]):
        tokens = list(mapping)
        return cls({t: i for i, t in enumerate(tokens)},
                   np.stack([np.asarray(mapping[t], dtype=np.float64) for t in tokens]))

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __contains__(self, token):
        return token in self.vocab

    def __getitem__(self, token) -> np.ndarray:
        return self.vectors[self.vocab[token]]

    def save(self, path, header=True) -> None:
        with open(path, "w", encoding="utf-8") as f:
            if header:
                f.write(f"{len(self.vocab)} {self.dim}\n")
            for tok, i in self.vocab.items():
                f.write(tok + " " + " ".join(repr(float(x)) for x in self.vectors[i]) + "\n")


def load_embeddings(path, dim: int | None = None) -> EmbeddingTable:
    """Read ``token v1 ... vd`` lines, with an optional ``count dim`` header."""
    vocab: dict[str, int] = {}
    rows = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            parts = line.rstrip().split(" ")
            if not parts or not parts[0]:
                continue
            if lineno == 1 and len(parts) == 2 and all(p.isdigit() for p in parts):
                dim = dim or int(parts[1])
                continue
            vec = np.array(parts[1:], dtype=np.float64)
            if dim is None:
                dim = len(vec)
            if len(vec) != dim:
                raise ValueError(f"{path}:{lineno}: expected {dim} values, got {len(vec)}")
            if parts[0] in vocab:
                continue
            vocab[parts[0]] = len(rows)
            rows.append(vec)
    vectors = np.stack(rows) if rows else np.zeros((0, dim or 0))
    return EmbeddingTable(vocab, vectors)


def embed_text(text: str, table: EmbeddingTable) -> np.ndarray:
    ids = [table.vocab[t] for t in tokenize(text) if t in table.vocab]
    if not ids:
        return np.zeros(table.dim, dtype=table.vectors.dtype)
    return table.vectors[ids].mean(axis=0)


def init_node_features(graph: TabularGraph, table: EmbeddingTable) -> np.ndarray:
    """Cell nodes embed their text; row/column nodes average their cells."""
    grid = graph.grid
    cells = np.stack([embed_text(c.text, table) for c in grid.cells])
    rows = [cells[np.unique(grid.occupancy[r])].mean(axis=0) for r in range(grid.n_rows)]
    cols = [cells[np.unique(grid.occupancy[:, c])].mean(axis=0) for c in range(grid.n_cols)]
    return np.concatenate([cells, np.stack(rows), np.stack(cols)])


@dataclass(frozen=True)
class GTConfig:
    layers: int = 4
    heads: int = 4
    hidden: int = 300
    dropout: float = 0.1
    slope: float = 0.2
    ffn_hidden: int | None = None
    eps: float = 1e-5

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError("need at least one layer")
        if self.hidden % self.heads:
            raise ValueError(f"{self.heads} heads do not divide hidden size {self.hidden}")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads


def init_encoder_params(store: ParameterStore, config: GTConfig, rng) -> None:
    """Per layer ``l``:

    * ``gt{l}.residual``  d x d, transforms the node's own state
    * ``gt{l}.attn_key``  d x (H*dh); column block ``h`` is head h's key map
    * ``gt{l}.attn_vec``  H x 2dh; row ``h`` scores [dst key || src key]
    * ``gt{l}.message``   d x (H*dh); column block ``h`` maps neighbour states
    * ``gt{l}.ffn.*``, ``gt{l}.norm.*``
    """
    d, H, dh = config.hidden, config.heads, config.head_dim
    dt = store.dtype
    for l in range(config.layers):
        p = f"gt{l}."
        store.add(p + "residual", xavier_init((d, d), rng, dt))
        store.add(p + "attn_key", np.concatenate(
            [xavier_init((d, dh), rng, dt) for _ in range(H)], axis=1))
        store.add(p + "attn_vec", xavier_init((2 * dh, H), rng, dt).T)
        store.add(p + "message", np.concatenate(
            [xavier_init((d, dh), rng, dt) for _ in range(H)], axis=1))
        if config.ffn_hidden:
            store.add(p + "ffn.weight", xavier_init((d, config.ffn_hidden), rng, dt))
            store.add(p + "ffn.bias", np.zeros(config.ffn_hidden))
            store.add(p + "ffn.weight2", xavier_init((config.ffn_hidden, d), rng, dt))
            store.add(p + "ffn.bias2", np.zeros(d))
        else:
            store.add(p + "ffn.weight", xavier_init((d, d), rng, dt))
            store.add(p + "ffn.bias", np.zeros(d))
        store.add(p + "norm.gain", np.ones(d))
        store.add(p + "norm.bias", np.zeros(d))


class GraphBatch:
    """Disjoint union of graphs with self-loops added for attention.

    ``src``/``dst`` list attention edges j -> i (j in the neighbourhood of i),
    sorted by destination.
    """

    def __init__(self, graphs, features):
        sizes = [g.n_nodes for g in graphs]
        self.offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        self.n_nodes = int(self.offsets[-1])
        src, dst = [], []
        for g, off in zip(graphs, self.offsets[:-1]):
            if len(g.edges):
                src.append(g.edges[:, 0] + off)
                dst.append(g.edges[:, 1] + off)
        loops = np.arange(self.n_nodes, dtype=np.int64)
        src = np.concatenate(src + [loops])
        dst = np.concatenate(dst + [loops])
        order = np.lexsort((src, dst))
        self.src, self.dst = src[order], dst[order]
        self.features = np.concatenate(features) if len(features) else np.zeros((0, 0))
        self.graphs = list(graphs)

    @classmethod
    def single(cls, graph, features):
        return cls([graph], [features])


def attention_scores(V: Tensor, batch: GraphBatch, store: ParameterStore, l: int,
                     config: GTConfig) -> Tensor:
    """Neighbourhood-normalized additive attention, shape (E, H)."""
    H, dh = config.heads, config.head_dim
    n = V.shape[0]
    keys = ag.reshape(V @ store[f"gt{l}.attn_key"], (n, H, dh))
    vec = store[f"gt{l}.attn_vec"]
    s_dst = ag.sum(keys * vec[:, :dh], axis=-1)
    s_src = ag.sum(keys * vec[:, dh:], axis=-1)
    raw = ag.leaky_relu(s_dst[batch.dst] + s_src[batch.src], config.slope)
    return ag.segment_softmax(raw, batch.dst, n)


def gt_layer_forward(V: Tensor, batch: GraphBatch, store: ParameterStore, l: int,
                     config: GTConfig, training=False, rng=None) -> Tensor:
    n, d = V.shape
    if d != config.hidden:
        raise ag.DimensionError(f"states have width {d}, layer expects {config.hidden}")
    H, dh = config.heads, config.head_dim
    p = f"gt{l}."
    alpha = attention_scores(V, batch, store, l, config)
    msgs = ag.reshape(V @ store[p + "message"], (n, H, dh))
    weighted = msgs[batch.src] * ag.reshape(alpha, alpha.shape + (1,))
    agg = ag.reshape(ag.segment_sum(weighted, batch.dst, n), (n, d))
    x = ag.leaky_relu(V @ store[p + "residual"] + agg, config.slope)
    x = x @ store[p + "ffn.weight"] + store[p + "ffn.bias"]
    if config.ffn_hidden:
        x = ag.leaky_relu(x, config.slope) @ store[p + "ffn.weight2"] + store[p + "ffn.bias2"]
    x = ag.layer_norm(x, store[p + "norm.gain"], store[p + "norm.bias"], config.eps)
    return ag.dropout(x, config.dropout, training, rng)


def encode_graph(batch: GraphBatch, store: ParameterStore, config: GTConfig,
                 features=None, training=False, rng=None) -> Tensor:
    """Run all layers; returns final node states in batch order."""
    V = ag.as_tensor(np.asarray(batch.features if features is None else features,
                                dtype=store.dtype))
    for l in range(config.layers):
        V = gt_layer_forward(V, batch, store, l, config, training, rng)
    return V
