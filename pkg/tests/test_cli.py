import csv
import json
import logging

import pytest
from conftest import make_table

from tabgraph.cli import main
from tabgraph.encoder import load_embeddings
from tabgraph.evaluation import evaluate_run, read_run
from tabgraph.model import TableRanker
from tabgraph.table import load_corpus, load_instances, write_corpus
from tabgraph.toy import make_toy_corpus, write_toy


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    paths = write_toy(make_toy_corpus(n_tables=8, n_queries=4, dim=12, seed=2), root)
    return {k: str(v) for k, v in paths.items()}


def flags(data, *keys):
    out = []
    for k in keys:
        out += [f"--{k}", data[k]]
    return out


SMALL_MODEL = ["--layers", "1", "--heads", "2", "--dtype", "float64"]


# -- convert ------------------------------------------------------------------------------

def test_convert_counts(tmp_path):
    corpus = tmp_path / "c.jsonl"
    write_corpus([make_table([["a", "b"]], tid="t1"),
                  make_table([[("h", 1, 2)], ["x", "y"]], tid="t/2"),
                  make_table([["z"]], tid="t3")], corpus)
    assert main(["convert", "--corpus", str(corpus), "--out", str(tmp_path / "o")]) == 0
    stats = json.loads((tmp_path / "o" / "stats.json").read_text())
    assert stats["table_count"] == 3 and stats["merged_table_count"] == 1
    # t/2: h-x, h-y, x-y both ways (6), cell->row 3, cell->col 4 (h spans two)
    assert stats["cell_nodes"] == 2 + 3 + 1 and stats["edges"] == 6 + 13 + 2
    assert sorted(p.name for p in (tmp_path / "o" / "graphs").iterdir()) == [
        "t1.json", "t3.json", "t_2.json"]


def test_convert_reports_bad_line(tmp_path, caplog):
    corpus = tmp_path / "c.jsonl"
    corpus.write_text(make_table([["a"]], tid="ok").to_json() + "\n{broken\n")
    with caplog.at_level(logging.ERROR):
        rc = main(["convert", "--corpus", str(corpus), "--out", str(tmp_path / "o")])
    assert rc == 1
    assert "line 2" in caplog.text
    stats = json.loads((tmp_path / "o" / "stats.json").read_text())
    assert stats["table_count"] == 1 and stats["failures"][0]["line"] == 2


def test_missing_input_is_config_error(tmp_path):
    assert main(["convert", "--corpus", str(tmp_path / "nope"), "--out", str(tmp_path)]) == 2


# -- pretrain -----------------------------------------------------------------------------

def test_pretrain_defaults_recorded(tmp_path):
    corpus = tmp_path / "c.jsonl"
    write_corpus([make_table([[f"v{i}"]], tid=f"t{i}", caption=f"cap {i}") for i in range(4)],
                 corpus)
    emb = tmp_path / "e.txt"
    make_toy_corpus(n_tables=2, n_queries=1, dim=8).embeddings.save(emb)
    out = tmp_path / "p"
    assert main(["pretrain", "--corpus", str(corpus), "--embeddings", str(emb), "--out",
                 str(out), "--layers", "1", "--heads", "2"]) == 0
    header = json.loads((out / "pretrain_log.jsonl").read_text().splitlines()[0])
    assert header["epochs"] == 20 and header["batch_size"] == 16 and header["seed"] == 0
    # 4 tables, batch 16 -> one step per epoch
    assert len((out / "pretrain_log.jsonl").read_text().splitlines()) == 21


def test_pretrain_one_epoch_is_loadable_and_deterministic(data, tmp_path):
    for k in range(2):
        assert main(["pretrain", *flags(data, "corpus", "embeddings"), "--epochs", "1",
                     "--out", str(tmp_path / f"p{k}"), *SMALL_MODEL]) == 0
    logs = [(tmp_path / f"p{k}" / "pretrain_log.jsonl").read_bytes() for k in range(2)]
    assert logs[0] == logs[1]
    model = TableRanker.from_checkpoint(tmp_path / "p0" / "pretrained.ckpt",
                                        load_embeddings(data["embeddings"]))
    assert model.gt.layers == 1


def test_pretrain_without_contexts_fails_clearly(tmp_path, caplog, data):
    corpus = tmp_path / "c.jsonl"
    write_corpus([make_table([["a"]], tid="a"), make_table([["b"]], tid="b")], corpus)
    rc = main(["pretrain", "--corpus", str(corpus), "--embeddings", data["embeddings"],
               "--out", str(tmp_path / "p"), *SMALL_MODEL])
    assert rc == 1 and "pre-training disabled" in caplog.text


# -- train / rank / evaluate / inspect ---------------------------------------------------------

@pytest.fixture(scope="module")
def trained(data, tmp_path_factory):
    out = tmp_path_factory.mktemp("trained")
    rc = main(["train", *flags(data, "corpus", "queries", "qrels", "embeddings"),
               "--objective", "nll", "--epochs", "2", "--batch-size", "2", "--warmup", "1",
               "--out", str(out), *SMALL_MODEL])
    assert rc == 0
    return out


def test_train_outputs(trained):
    assert (trained / "model.ckpt").exists() and (trained / "run.txt").exists()
    assert sorted(p.name for p in (trained / "checkpoints").iterdir()) == [
        "epoch001.ckpt", "epoch002.ckpt"]
    header = json.loads((trained / "train_log.jsonl").read_text().splitlines()[0])
    assert header["seed"] == 0 and header["objective"] == "nll"
    assert (trained / "run.txt").read_text().split()[5] == "tabgraph-s0"


def test_rank_then_evaluate_matches_library(data, trained, tmp_path, capsys):
    run = tmp_path / "run.txt"
    assert main(["rank", *flags(data, "corpus", "queries", "qrels", "embeddings"),
                 "--checkpoint", str(trained / "model.ckpt"), "--out", str(run)]) == 0
    capsys.readouterr()
    assert main(["evaluate", "--qrels", data["qrels"], "--run", str(run),
                 "--out", str(tmp_path / "ev.json")]) == 0
    printed = capsys.readouterr().out.strip().splitlines()[-1]

    corpus = load_corpus(data["corpus"])
    inst = load_instances(data["queries"], data["qrels"], corpus)
    model = TableRanker.from_checkpoint(trained / "model.ckpt", load_embeddings(data["embeddings"]))
    report = evaluate_run(model.rank_instances(inst, corpus),
                          {i.query_id: dict(i.candidates) for i in inst})
    assert printed == f"MAP {report.mean['map']:.4f}"
    saved = json.loads((tmp_path / "ev.json").read_text())
    assert saved["mean"]["map"] == report.mean["map"]


def test_evaluate_perfect_run(data, tmp_path, capsys):
    lines = []
    for line in open(data["qrels"]):
        q, _, t, g = line.split()
        if g == "1":
            lines.append(f"{q} Q0 {t} 1 1.0 hand\n")
    (tmp_path / "perfect").write_text("".join(lines))
    assert main(["evaluate", "--qrels", data["qrels"], "--run", str(tmp_path / "perfect")]) == 0
    assert capsys.readouterr().out.strip().endswith("MAP 1.0000")


def test_bm25_rank_without_checkpoint(data, tmp_path):
    assert main(["rank", *flags(data, "corpus", "queries"), "--out",
                 str(tmp_path / "bm25")]) == 0
    run = read_run(tmp_path / "bm25")
    assert len(run) == 4 and all(len(v) == 8 for v in run.values())


def test_inspect_single_and_batch(data, trained, tmp_path):
    ck = str(trained / "model.ckpt")
    assert main(["inspect", *flags(data, "corpus", "embeddings"), "--checkpoint", ck,
                 "--query", "total year", "--table", "t000", "--out",
                 str(tmp_path / "one.csv")]) == 0
    with open(tmp_path / "one.csv") as f:
        assert sum(int(r["frequency"]) for r in csv.DictReader(f)) == 300
    assert main(["inspect", *flags(data, "corpus", "embeddings", "queries", "qrels"),
                 "--checkpoint", ck, "--out", str(tmp_path / "all")]) == 0
    files = sorted((tmp_path / "all").iterdir())
    assert len(files) == 4 * 8
    for p in files:
        with open(p) as f:
            freqs = [int(r["frequency"]) for r in csv.DictReader(f)]
        assert sum(freqs) == 300 and min(freqs) >= 0


def test_train_is_byte_deterministic(data, trained, tmp_path):
    assert main(["train", *flags(data, "corpus", "queries", "qrels", "embeddings"),
                 "--objective", "nll", "--epochs", "2", "--batch-size", "2", "--warmup", "1",
                 "--out", str(tmp_path), *SMALL_MODEL]) == 0
    for name in ("model.ckpt", "run.txt", "train_log.jsonl"):
        assert (tmp_path / name).read_bytes() == (trained / name).read_bytes(), name


def test_train_from_pretrained_and_folds(data, tmp_path):
    assert main(["pretrain", *flags(data, "corpus", "embeddings"), "--epochs", "1",
                 "--out", str(tmp_path / "p"), *SMALL_MODEL]) == 0
    rc = main(["train", *flags(data, "corpus", "queries", "qrels", "embeddings"),
               "--checkpoint", str(tmp_path / "p" / "pretrained.ckpt"), "--folds", "2",
               "--epochs", "1", "--objective", "mse", "--out", str(tmp_path / "cv"),
               *SMALL_MODEL])
    assert rc == 0
    assert (tmp_path / "cv" / "fold0" / "model.ckpt").exists()
    assert (tmp_path / "cv" / "fold1" / "model.ckpt").exists()
    report = json.loads((tmp_path / "cv" / "cv_eval.json").read_text())
    assert len(report["per_query"]) == 4
    assert len(read_run(tmp_path / "cv" / "run.txt")) == 4


def test_checkpoint_shape_mismatch_exits_2(data, tmp_path, caplog):
    assert main(["pretrain", *flags(data, "corpus", "embeddings"), "--epochs", "1",
                 "--out", str(tmp_path / "p"), *SMALL_MODEL]) == 0
    rc = main(["train", *flags(data, "corpus", "queries", "qrels", "embeddings"),
               "--checkpoint", str(tmp_path / "p" / "pretrained.ckpt"), "--epochs", "1",
               "--out", str(tmp_path / "t"), "--layers", "2", "--heads", "2"])
    assert rc == 2 and "does not match" in caplog.text


def test_config_file_and_overrides(data, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# experiment\nepochs = 1\nobjective = nll\nlayers = 1\nheads = 2\n"
                   "batch_size = 4\nseed = 7\n")
    rc = main(["train", "--config", str(cfg), *flags(data, "corpus", "queries", "qrels",
                                                     "embeddings"),
               "--seed", "3", "--out", str(tmp_path / "o")])
    assert rc == 0
    header = json.loads((tmp_path / "o" / "train_log.jsonl").read_text().splitlines()[0])
    assert header["seed"] == 3 and header["epochs"] == 1 and header["batch_size"] == 4
    cfg.write_text("bogus = 1\n")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "x")]) == 2


def test_make_toy(tmp_path):
    assert main(["make-toy", "--out", str(tmp_path), "--tables", "6", "--n-queries", "3"]) == 0
    assert len(load_corpus(tmp_path / "corpus.jsonl")) == 6
