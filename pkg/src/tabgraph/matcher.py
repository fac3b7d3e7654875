"""Query-graph and query-context matching heads and the relevance scorer."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import ParameterStore, Tensor, xavier_init
from .encoder import EmbeddingTable, embed_text
from .graph import NodeKind, TabularGraph
from .table import TableContext


@dataclass(frozen=True)
class MatchConfig:
    match_dim: int = 300
    context_dim: int = 300
    mlp_hidden: int = 128
    dropout: float = 0.1
    eps: float = 1e-5


def init_match_params(store: ParameterStore, d: int, config: MatchConfig, rng,
                      context_params=True) -> None:
    dt = store.dtype
    dm, dc = config.match_dim, config.context_dim
    store.add("match.proj.weight", xavier_init((d, d), rng, dt))
    store.add("match.proj.bias", np.zeros(d))
    store.add("match.proj.norm.gain", np.ones(d))
    store.add("match.proj.norm.bias", np.zeros(d))
    store.add("match.fuse.weight", xavier_init((4 * d, dm), rng, dt))
    store.add("match.fuse.bias", np.zeros(dm))
    store.add("pretrain.head.weight", xavier_init((dm, 1), rng, dt))
    store.add("pretrain.head.bias", np.zeros(1))
    if context_params:
        store.add("context.fuse.weight", xavier_init((4 * d, dc), rng, dt))
        store.add("context.fuse.bias", np.zeros(dc))
    store.add("scorer.hidden.weight", xavier_init((dm + dc, config.mlp_hidden), rng, dt))
    store.add("scorer.hidden.bias", np.zeros(config.mlp_hidden))
    store.add("scorer.out.weight", xavier_init((config.mlp_hidden, 1), rng, dt))
    store.add("scorer.out.bias", np.zeros(1))


def project_nodes(V: Tensor, store: ParameterStore, eps=1e-5) -> Tensor:
    x = V @ store["match.proj.weight"] + store["match.proj.bias"]
    return ag.layer_norm(x, store["match.proj.norm.gain"], store["match.proj.norm.bias"], eps)


class StaticQueryEncoder:
    """Average of static token vectors, living in the node-feature space."""

    def __init__(self, embeddings: EmbeddingTable):
        self.embeddings = embeddings

    @property
    def dim(self):
        return self.embeddings.dim

    def __call__(self, text: str) -> np.ndarray:
        return embed_text(text, self.embeddings)


def encode_query(text: str, embeddings: EmbeddingTable) -> np.ndarray:
    return embed_text(text, embeddings)


def fuse(v, q) -> Tensor:
    """[v || q || v - q || v * q] along the last axis; ``q`` broadcasts over rows."""
    v, q = ag.as_tensor(v), ag.as_tensor(q)
    if v.shape[-1] != q.shape[-1]:
        raise ag.DimensionError(f"fuse: widths differ, {v.shape} vs {q.shape}")
    if q.ndim < v.ndim:
        q = ag.reshape(q, (1,) * (v.ndim - q.ndim) + q.shape)[np.zeros(v.shape[0], np.int64)]
    return ag.concat([v, q, v - q, v * q], axis=-1)


def match_nodes(nodes, q, store: ParameterStore) -> Tensor:
    """Per-node matching states tanh(W [v || q || v - q || v * q] + b)."""
    return ag.tanh(fuse(nodes, q) @ store["match.fuse.weight"] + store["match.fuse.bias"])


def match_pairs(Vp: Tensor, Q: Tensor, node_idx, q_idx, store: ParameterStore) -> Tensor:
    """Row-batched ``match_nodes`` for many (query, node) pairs at once.

    Splits the fusion weight into its four row blocks so the node and query
    terms are computed once per node / query instead of once per pair.
    """
    d = Vp.shape[1]
    W = store["match.fuse.weight"]
    w_v, w_q, w_diff, w_prod = (W[k * d:(k + 1) * d] for k in range(4))
    node_term = Vp @ (w_v + w_diff)
    query_term = Q @ (w_q - w_diff)
    prod = (Vp[node_idx] * Q[q_idx]) @ w_prod
    return ag.tanh(node_term[node_idx] + query_term[q_idx] + prod + store["match.fuse.bias"])


def pool(h, starts=(0,)):
    """Max over the node axis; ties go to the lowest node index."""
    return ag.segment_max(ag.as_tensor(h), starts)


class StaticContextEncoder:
    """Fusion of query and context embeddings followed by a tanh map."""

    trainable = True

    def __init__(self, embeddings: EmbeddingTable):
        self.embeddings = embeddings

    def vector(self, context: TableContext) -> np.ndarray:
        return embed_text(context.text(), self.embeddings)

    def __call__(self, Qp: Tensor, contexts, store: ParameterStore, queries=None) -> Tensor:
        C = np.stack([self.vector(c) for c in contexts]).astype(store.dtype)
        x = fuse(Qp, C) @ store["context.fuse.weight"] + store["context.fuse.bias"]
        return ag.tanh(x)


def format_pair(query: str, context: TableContext, sep="[SEP]") -> str:
    return f" {sep} ".join([query, context.caption, context.page_title, context.section_title])


class PairEncoderAdapter:
    """Wraps an external sentence-pair encoder (e.g. a BERT-style model).

    ``encode`` takes a list of ``query [SEP] caption [SEP] page [SEP] section``
    strings and returns an (n, dim) array of first-position vectors. The
    wrapped model is frozen; its outputs are constants for training.
    """

    trainable = False

    def __init__(self, encode, dim: int):
        self.encode = encode
        self.dim = dim

    def __call__(self, Qp, contexts, store, queries=None) -> Tensor:
        texts = [format_pair(q, c) for q, c in zip(queries, contexts)]
        out = np.asarray(self.encode(texts), dtype=store.dtype)
        if out.shape != (len(texts), self.dim):
            raise ag.DimensionError(f"adapter returned {out.shape}, expected "
                                    f"({len(texts)}, {self.dim})")
        return ag.as_tensor(out)


def context_match(query: str, context: TableContext, embeddings: EmbeddingTable,
                  store: ParameterStore) -> np.ndarray:
    enc = StaticContextEncoder(embeddings)
    q = embed_text(query, embeddings).astype(store.dtype)[None]
    with ag.no_grad():
        return enc(ag.as_tensor(q), [context], store).data[0]


def score(graph_match, ctx_match, store: ParameterStore, dropout=0.0, training=False,
          rng=None) -> Tensor:
    """MLP relevance score of [graph_match || ctx_match]; one value per row."""
    h = ag.concat([ag.as_tensor(graph_match), ag.as_tensor(ctx_match)], axis=-1)
    h = ag.dropout(h, dropout, training, rng)
    hidden = ag.tanh(h @ store["scorer.hidden.weight"] + store["scorer.hidden.bias"])
    out = hidden @ store["scorer.out.weight"] + store["scorer.out.bias"]
    return ag.reshape(out, out.shape[:-1])


def pool_frequency(pool_argmax, n_nodes: int) -> np.ndarray:
    """How many pooled dimensions each node won."""
    return np.bincount(np.asarray(pool_argmax).ravel(), minlength=n_nodes)


def attribution_rows(graph: TabularGraph, frequency) -> list[dict]:
    rows = []
    for i, node in enumerate(graph.nodes):
        if node.kind is NodeKind.CELL:
            r, c = graph.grid.origins[node.index]
            rec = {"node_kind": "cell", "row": r, "col": c, "cell_index": node.index}
        elif node.kind is NodeKind.ROW:
            rec = {"node_kind": "row", "row": node.index, "col": "", "cell_index": ""}
        else:
            rec = {"node_kind": "col", "row": "", "col": node.index, "cell_index": ""}
        rec["frequency"] = int(frequency[i])
        rows.append(rec)
    return rows


ATTRIBUTION_FIELDS = ["node_kind", "row", "col", "cell_index", "frequency"]


def write_attribution_csv(graph: TabularGraph, frequency, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=ATTRIBUTION_FIELDS, lineterminator="\n")
        w.writeheader()
        w.writerows(attribution_rows(graph, frequency))
