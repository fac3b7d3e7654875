import csv

import numpy as np
import pytest
from conftest import make_table, random_table
from test_encoder import SMALL, permuted, small_store

from tabgraph import autograd as ag
from tabgraph.autograd import ParameterStore, Tensor
from tabgraph.encoder import EmbeddingTable, GraphBatch, embed_text, encode_graph
from tabgraph.graph import build_graph
from tabgraph.matcher import (MatchConfig, PairEncoderAdapter, StaticContextEncoder,
                              context_match, encode_query, format_pair, fuse, init_match_params,
                              match_nodes, match_pairs, pool, pool_frequency, project_nodes,
                              score, write_attribution_csv)
from tabgraph.table import TableContext

D = SMALL.hidden
MC = MatchConfig(match_dim=10, context_dim=10, mlp_hidden=6, dropout=0.0)


def match_store(seed=0, d=D, config=MC):
    store = small_store(seed=seed)
    init_match_params(store, d, config, np.random.default_rng(seed + 100))
    rng = np.random.default_rng(seed + 200)
    for name, t in store.items():
        if name.endswith("bias") or name.endswith("gain"):
            t.data = rng.normal(size=t.shape)
    return store


def pipeline(graph_like, V0, q, ctx_vec, store):
    V = encode_graph(GraphBatch([graph_like], [V0]), store, SMALL)
    h = match_nodes(project_nodes(V, store), q, store)
    graph_match, arg = pool(h)
    Qp = ag.as_tensor(q[None])
    ctx_match = ag.tanh(fuse(Qp, ctx_vec[None]) @ store["context.fuse.weight"]
                   + store["context.fuse.bias"])
    return score(graph_match, ctx_match, store), arg


# -- projection and fusion ------------------------------------------------------------

def test_projection_identity_is_layer_norm():
    store = match_store()
    store["match.proj.weight"].data = np.eye(D)
    store["match.proj.bias"].data = np.zeros(D)
    V = np.random.default_rng(0).normal(size=(5, D))
    g, b = store["match.proj.norm.gain"].data, store["match.proj.norm.bias"].data
    ref = np.stack([(v - v.mean()) / np.sqrt(v.var() + 1e-5) * g + b for v in V])
    assert np.abs(project_nodes(Tensor(V), store).data - ref).max() < 1e-10
    const = project_nodes(Tensor(np.zeros((2, D))), store).data
    assert np.allclose(const, b)


def test_projection_loop_reference():
    store = match_store(seed=3)
    V = np.random.default_rng(1).normal(size=(4, D))
    W, b0 = store["match.proj.weight"].data, store["match.proj.bias"].data
    g, b = store["match.proj.norm.gain"].data, store["match.proj.norm.bias"].data
    for i in range(4):
        x = np.array([sum(V[i, k] * W[k, j] for k in range(D)) for j in range(D)]) + b0
        ref = (x - x.mean()) / np.sqrt(x.var() + 1e-5) * g + b
        assert np.abs(project_nodes(Tensor(V[i:i + 1]), store).data[0] - ref).max() < 1e-10


def test_fusion_blocks():
    q = np.arange(1.0, 4.0)
    f = fuse(Tensor(q[None]), Tensor(q)).data[0]
    assert np.array_equal(f, np.concatenate([q, q, np.zeros(3), q * q]))
    v = np.array([2.0, -1.0, 0.5])
    f = fuse(Tensor(v[None]), Tensor(np.zeros(3))).data[0]
    assert np.array_equal(f, np.concatenate([v, np.zeros(3), v, np.zeros(3)]))
    with pytest.raises(ag.DimensionError):
        fuse(Tensor(np.ones((2, 3))), Tensor(np.ones(4)))


def test_match_outputs_bounded():
    store = match_store()
    h = match_nodes(Tensor(np.random.default_rng(0).normal(size=(7, D)) * 50),
                    Tensor(np.ones(D) * 9), store).data
    assert h.shape == (7, MC.match_dim) and (np.abs(h) <= 1).all()


def test_fast_pairs_equal_explicit_concat():
    store = match_store(seed=5)
    rng = np.random.default_rng(0)
    Vp, Q = rng.normal(size=(9, D)), rng.normal(size=(3, D))
    node_idx = np.array([0, 1, 2, 3, 3, 4, 5, 6, 7, 8, 0])
    q_idx = np.array([0, 0, 0, 1, 2, 1, 1, 2, 2, 2, 1])
    fast = match_pairs(Tensor(Vp), Tensor(Q), node_idx, q_idx, store).data
    for k, (n, q) in enumerate(zip(node_idx, q_idx)):
        slow = match_nodes(Tensor(Vp[n:n + 1]), Tensor(Q[q]), store).data[0]
        assert np.abs(fast[k] - slow).max() < 1e-12


def test_fast_pairs_gradients_equal_explicit():
    rng = np.random.default_rng(1)
    Vp, Q = rng.normal(size=(4, D)), rng.normal(size=(2, D))
    node_idx, q_idx = np.array([0, 1, 2, 3]), np.array([0, 0, 1, 1])
    grads = []
    for route in ("fast", "explicit"):
        store = match_store(seed=2)
        if route == "fast":
            h = match_pairs(Tensor(Vp), Tensor(Q), node_idx, q_idx, store)
        else:
            h = ag.concat([match_nodes(Tensor(Vp[[n]]), Tensor(Q[q]), store)
                           for n, q in zip(node_idx, q_idx)], axis=0)
        ag.backward(ag.sum(h * h), store)
        grads.append(store["match.fuse.weight"].grad.copy())
    assert np.abs(grads[0] - grads[1]).max() < 1e-12


# -- pooling ----------------------------------------------------------------------------

def test_pool_examples():
    h = np.random.default_rng(0).normal(size=(1, 4))
    y, arg = pool(h)
    assert np.array_equal(y.data[0], h[0]) and not arg.any()
    y, arg = pool(np.array([[1.0, -2.0], [0.0, 5.0]]))
    assert y.data[0].tolist() == [1, 5] and arg[0].tolist() == [0, 1]
    y, arg = pool(np.array([[0.3, 0.3], [0.3, 0.3]]))
    assert arg[0].tolist() == [0, 0]


def test_pool_permutation_and_monotonicity():
    rng = np.random.default_rng(4)
    for _ in range(20):
        h = rng.normal(size=(6, 5))
        y = pool(h)[0].data[0]
        assert np.array_equal(pool(h[rng.permutation(6)])[0].data[0], y)
        k, j = rng.integers(6), rng.integers(5)
        h2 = h.copy()
        h2[k, j] = y[j] + 0.5
        assert pool(h2)[0].data[0, j] > y[j]


def test_pool_empty_raises():
    with pytest.raises(ValueError):
        pool(np.zeros((0, 3)))


# -- query and context --------------------------------------------------------------------

def test_encode_query():
    emb = EmbeddingTable.from_dict({w: np.random.default_rng(len(w)).normal(size=4)
                                    for w in ["asian", "countries", "currency"]})
    assert not encode_query("", emb).any()
    assert np.array_equal(encode_query("currency", emb), emb["currency"])
    assert np.allclose(encode_query("asian countries currency", emb),
                       (emb["asian"] + emb["countries"] + emb["currency"]) / 3)


def test_context_match():
    emb = EmbeddingTable.from_dict({w: np.random.default_rng(len(w)).normal(size=D)
                                    for w in ["gdp", "population", "list"]})
    store = match_store()
    h = context_match("", TableContext(), emb, store)
    W, b = store["context.fuse.weight"].data, store["context.fuse.bias"].data
    assert np.allclose(h, np.tanh(np.zeros(4 * D) @ W + b))
    q = embed_text("gdp list", emb)
    f = fuse(Tensor(q[None]), Tensor(q)).data[0]
    assert not f[2 * D:3 * D].any()
    h = context_match("gdp", TableContext("population", "list", ""), emb, store)
    assert h.shape == (MC.context_dim,) and (np.abs(h) < 1).all()


def test_pair_adapter_contract():
    seen = []

    def fake_encoder(texts):
        seen.extend(texts)
        return np.ones((len(texts), 7))
    ad = PairEncoderAdapter(fake_encoder, 7)
    out = ad(None, [TableContext("cap", "page", "sec")], ParameterStore(), queries=["q"])
    assert out.shape == (1, 7)
    assert seen == ["q [SEP] cap [SEP] page [SEP] sec"]
    assert format_pair("q", TableContext()) == "q [SEP]  [SEP]  [SEP] "
    bad = PairEncoderAdapter(lambda t: np.ones((len(t), 3)), 7)
    with pytest.raises(ag.DimensionError):
        bad(None, [TableContext()], ParameterStore(), queries=["q"])


def test_static_context_encoder_batches():
    emb = EmbeddingTable.from_dict({"a": np.ones(D), "b": -np.ones(D)})
    store = match_store()
    enc = StaticContextEncoder(emb)
    Qp = Tensor(np.random.default_rng(0).normal(size=(2, D)))
    both = enc(Qp, [TableContext("a"), TableContext("b")], store).data
    one = enc(Tensor(Qp.data[1:]), [TableContext("b")], store).data
    assert np.allclose(both[1], one[0])


# -- scorer -----------------------------------------------------------------------------

def test_score_zero_weights_is_bias():
    store = match_store()
    for n in ("scorer.hidden.weight", "scorer.out.weight"):
        store[n].data = np.zeros_like(store[n].data)
    s = score(np.ones((3, 10)), np.ones((3, 10)), store).data
    assert np.allclose(s, store["scorer.out.bias"].data[0])


@pytest.mark.parametrize("seed", range(5))
def test_score_invariant_to_node_order(seed):
    rng = np.random.default_rng(seed)
    table, _ = random_table(rng, max_rows=3, max_cols=3)
    g = build_graph(table)
    store = match_store(seed)
    V0, q, c = rng.normal(size=(g.n_nodes, D)), rng.normal(size=D), rng.normal(size=D)
    perm = rng.permutation(g.n_nodes)
    s, arg = pipeline(g, V0, q, c, store)
    s_p, arg_p = pipeline(permuted(g, perm), V0[perm], q, c, store)
    assert abs(s.data[0] - s_p.data[0]) < 1e-12
    # pooled winners map through the permutation (ties are measure-zero here)
    assert np.array_equal(perm[arg_p[0]], arg[0])


def test_every_match_param_gets_gradient():
    rng = np.random.default_rng(0)
    g = build_graph(make_table([["a", "b"], ["c", "d"]]))
    store = match_store()
    s, _ = pipeline(g, rng.normal(size=(g.n_nodes, D)), rng.normal(size=D),
                    rng.normal(size=D), store)
    ag.backward(ag.sum(s), store)
    for name in store:
        if name.startswith(("match.", "context.", "scorer.")):
            assert np.abs(store[name].grad).max() > 0, name


# -- attribution ---------------------------------------------------------------------------

def test_frequency_examples():
    assert pool_frequency(np.zeros((1, 300), int), 1).tolist() == [300]
    _, arg = pool(np.tile(np.random.default_rng(0).normal(size=(1, 300)), (2, 1)))
    assert pool_frequency(arg, 2).tolist() == [300, 0]


def test_attribution_csv(tmp_path, wages):
    g = build_graph(wages)
    h = np.random.default_rng(0).normal(size=(g.n_nodes, 300))
    freq = pool_frequency(pool(h)[1], g.n_nodes)
    assert freq.sum() == 300
    write_attribution_csv(g, freq, tmp_path / "a.csv")
    with open(tmp_path / "a.csv") as f:
        rows = list(csv.DictReader(f))
    assert list(rows[0]) == ["node_kind", "row", "col", "cell_index", "frequency"]
    assert sum(int(r["frequency"]) for r in rows) == 300
    assert [r["node_kind"] for r in rows].count("row") == 5
    assert rows[7] == {"node_kind": "cell", "row": "3", "col": "0", "cell_index": "7",
                       "frequency": str(freq[7])}
