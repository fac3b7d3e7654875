"""The full ranker: graph encoder, matching heads and scorer behind one object."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import CheckpointError, ParameterStore, Tensor
from .encoder import (EmbeddingTable, GraphBatch, GTConfig, encode_graph,
                      init_encoder_params, init_node_features)
from .evaluation import rank
from .graph import TabularGraph, build_graph
from .matcher import (MatchConfig, StaticContextEncoder, StaticQueryEncoder,
                      init_match_params, match_pairs, pool, pool_frequency,
                      project_nodes, score)
from .table import Table, resolve_grid


@dataclass
class Forward:
    scores: Tensor
    pool_argmax: np.ndarray  # (pairs, match_dim), node offsets within each table
    graph_match: Tensor
    ctx_match: Tensor | None


class TableRanker:
    def __init__(self, embeddings: EmbeddingTable, gt: GTConfig = GTConfig(),
                 match: MatchConfig = MatchConfig(), seed: int = 0, dtype=np.float64,
                 query_encoder=None, context_encoder=None):
        self.embeddings = embeddings
        self.gt = gt
        self.match = match
        self.seed = seed
        self.query_encoder = query_encoder or StaticQueryEncoder(embeddings)
        self.context_encoder = context_encoder or StaticContextEncoder(embeddings)
        if self.query_encoder.dim != gt.hidden or embeddings.dim != gt.hidden:
            raise ag.DimensionError(
                f"embedding width {embeddings.dim} must equal hidden size {gt.hidden}")
        self.store = ParameterStore(dtype)
        rng = np.random.default_rng(seed)
        init_encoder_params(self.store, gt, rng)
        init_match_params(self.store, gt.hidden, match, rng,
                          context_params=getattr(self.context_encoder, "trainable", True))
        self.rng = np.random.default_rng([seed, 1])
        self._prepared: dict[str, tuple[TabularGraph, np.ndarray]] = {}

    # -- parameter groups ---------------------------------------------------

    def graph_branch_names(self) -> list[str]:
        return [n for n in self.store if n.startswith(("gt", "match."))]

    def pretrain_names(self) -> list[str]:
        return self.graph_branch_names() + [n for n in self.store if n.startswith("pretrain.")]

    def context_branch_names(self) -> list[str]:
        return [n for n in self.store if n.startswith(("context.", "scorer."))]

    def finetune_names(self) -> list[str]:
        return [n for n in self.store if not n.startswith("pretrain.")]

    # -- forward ------------------------------------------------------------

    def prepare(self, table: Table) -> tuple[TabularGraph, np.ndarray]:
        hit = self._prepared.get(table.id)
        if hit is None:
            graph = build_graph(table, resolve_grid(table))
            feats = init_node_features(graph, self.embeddings).astype(self.store.dtype)
            hit = self._prepared[table.id] = (graph, feats)
        return hit

    def query_vectors(self, texts) -> np.ndarray:
        return np.stack([self.query_encoder(t) for t in texts]).astype(self.store.dtype)

    def forward(self, queries, tables, pairs, training=False, head="score") -> Forward:
        """Score ``pairs`` of (query index, table index).

        ``head="pretrain"`` scores with the graph branch only, through the
        pre-training head.
        """
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        used = sorted(set(pairs[:, 1].tolist()))
        local = {t: k for k, t in enumerate(used)}
        prepared = [self.prepare(tables[t]) for t in used]
        batch = GraphBatch([g for g, _ in prepared], [f for _, f in prepared])
        V = encode_graph(batch, self.store, self.gt, training=training, rng=self.rng)
        Vp = project_nodes(V, self.store, self.match.eps)
        Q = ag.as_tensor(self.query_vectors(queries))

        sizes = np.array([prepared[local[t]][0].n_nodes for t in pairs[:, 1]])
        starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
        node_idx = np.concatenate([np.arange(batch.offsets[local[t]], batch.offsets[local[t] + 1])
                                   for t in pairs[:, 1]])
        q_idx = np.repeat(pairs[:, 0], sizes)
        h = match_pairs(Vp, Q, node_idx, q_idx, self.store)
        graph_match, arg = pool(h, starts)

        if head == "pretrain":
            x = ag.dropout(graph_match, self.match.dropout, training, self.rng)
            s = x @ self.store["pretrain.head.weight"] + self.store["pretrain.head.bias"]
            return Forward(ag.reshape(s, (len(pairs),)), arg, graph_match, None)

        Qp = Q[pairs[:, 0]]
        contexts = [tables[t].context for t in pairs[:, 1]]
        ctx_match = self.context_encoder(Qp, contexts, self.store,
                                    queries=[queries[i] for i in pairs[:, 0]])
        s = score(graph_match, ctx_match, self.store, self.match.dropout, training, self.rng)
        return Forward(s, arg, graph_match, ctx_match)

    def score_tables(self, query: str, tables) -> np.ndarray:
        """Eval-mode scores of one query against each table."""
        tables = list(tables)
        if not tables:
            return np.zeros(0)
        with ag.no_grad():
            out = self.forward([query], tables, [(0, k) for k in range(len(tables))])
        return out.scores.data.astype(np.float64)

    def rank_instances(self, instances, corpus, max_pairs=4096) -> dict[str, list]:
        """Eval-mode ranked (table_id, score) lists for every instance.

        Candidate tables are encoded once per chunk of queries.
        """
        run = {}
        chunk: list = []

        def flush():
            if not chunk:
                return
            t_index: dict[str, int] = {}
            pairs = []
            for q, inst in enumerate(chunk):
                for tid in inst.table_ids:
                    pairs.append((q, t_index.setdefault(tid, len(t_index))))
            if not pairs:
                run.update({i.query_id: [] for i in chunk})
                chunk.clear()
                return
            with ag.no_grad():
                out = self.forward([i.query_text for i in chunk],
                                   [corpus[t] for t in t_index], pairs)
            scores = out.scores.data.astype(np.float64)
            k = 0
            for inst in chunk:
                n = len(inst.candidates)
                run[inst.query_id] = rank(dict(zip(inst.table_ids, scores[k:k + n].tolist())))
                k += n
            chunk.clear()

        size = 0
        for inst in instances:
            if size + len(inst.candidates) > max_pairs:
                flush()
                size = 0
            chunk.append(inst)
            size += len(inst.candidates)
        flush()
        return run

    def pool_argmax(self, query: str, table: Table) -> np.ndarray:
        with ag.no_grad():
            return self.forward([query], [table], [(0, 0)]).pool_argmax[0]

    def attribution(self, query: str, table: Table) -> tuple[TabularGraph, np.ndarray]:
        """Per-node count of pooled dimensions won; sums to the match width."""
        graph, _ = self.prepare(table)
        return graph, pool_frequency(self.pool_argmax(query, table), graph.n_nodes)

    # -- persistence --------------------------------------------------------

    def config_meta(self) -> dict:
        return {"gt": dataclasses.asdict(self.gt), "match": dataclasses.asdict(self.match),
                "seed": self.seed, "dtype": self.store.dtype.name,
                "embedding_dim": self.embeddings.dim,
                "n_params": len(self.store)}

    def save(self, path, extra=None) -> None:
        meta = self.config_meta()
        if extra:
            meta.update(extra)
        ag.save_checkpoint(self.store, path, meta)

    def load(self, path, names=None, moments=True) -> dict:
        meta, _, entries = ag.read_checkpoint(path)
        for key in ("gt", "match"):
            if key in meta and meta[key] != self.config_meta()[key]:
                raise CheckpointError(f"{path}: checkpoint {key} config {meta[key]} does not "
                                      f"match model {self.config_meta()[key]}")
        return ag.load_checkpoint(self.store, path, names=names, moments=moments)

    @classmethod
    def from_checkpoint(cls, path, embeddings: EmbeddingTable, **kw) -> "TableRanker":
        meta, _, _ = ag.read_checkpoint(path)
        gt = GTConfig(**meta["gt"])
        match = MatchConfig(**meta["match"])
        model = cls(embeddings, gt, match, seed=meta.get("seed", 0),
                    dtype=np.dtype(meta.get("dtype", "float64")), **kw)
        model.load(path)
        return model
