"""Table retrieval with graph-encoded tables and query matching."""
from .autograd import ParameterStore
from .encoder import EmbeddingTable, GraphBatch, GTConfig, encode_graph, load_embeddings
from .evaluation import Bm25Index, bm25_rank, evaluate_run, read_run, write_run
from .graph import TabularGraph, build_graph, graph_stats
from .matcher import MatchConfig
from .model import TableRanker
from .table import Cell, Table, TableContext, load_corpus, load_instances, resolve_grid
from .toy import make_toy_corpus
from .training import TrainConfig, pretrain, train

__all__ = [
    "Bm25Index", "Cell", "EmbeddingTable", "GTConfig", "GraphBatch", "MatchConfig",
    "ParameterStore", "Table", "TableContext", "TableRanker", "TabularGraph", "TrainConfig",
    "bm25_rank", "build_graph", "encode_graph", "evaluate_run", "graph_stats", "load_corpus",
    "load_embeddings", "load_instances", "make_toy_corpus", "pretrain", "read_run",
    "resolve_grid", "train", "write_run",
]
__version__ = "0.1.0"
