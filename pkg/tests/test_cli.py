import json

import numpy as np
import pytest

from unic.baselines import write_assignments
from unic.cli import main, read_config, UsageError
from unic.embed_store import EmbeddingSet, read_embeddings, read_split, write_embeddings, write_split
from unic.neighbors import eta_sweep, neighbor_stats, read_index

from .test_metrics import TestGCD

FAST = ["--epochs", "3", "--hidden", "32", "--batch", "64"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("pipeline")
    assert main(["gen", "--n", "300", "--dim", "8", "--classes", "4", "--sep", "8", "--seed", "2",
                 "--labeled-frac", "0.5", "--old-frac", "0.5", "--out", str(d)]) == 0
    assert main(["mine", "--embeddings", str(d / "embeddings.emb"), "--out", str(d)]) == 0
    return d


class TestGen:
    def test_header(self, tmp_path, capsys):
        code, out, _ = run(capsys, "gen", "--n", 2000, "--dim", 32, "--classes", 10, "--sep", 6,
                           "--seed", 1, "--out", tmp_path / "data.emb")
        assert code == 0
        raw = (tmp_path / "data.emb").read_bytes()
        assert int.from_bytes(raw[8:12], "little") == 2000
        assert read_embeddings(tmp_path / "data.emb").dim == 32
        summary = json.loads(out)
        assert summary["n"] == 2000 and summary["k"] == 10 and summary["purity@10"] > 0.9

    def test_zero_classes(self, tmp_path, capsys):
        code, _, err = run(capsys, "gen", "--classes", 0, "--out", tmp_path)
        assert code == 2 and err.startswith("error: usage:") and err.count("\n") == 1

    def test_split_file(self, tmp_path, capsys):
        code, _, _ = run(capsys, "gen", "--n", 200, "--classes", 10, "--labeled-frac", 0.5,
                         "--old-frac", 0.5, "--out", tmp_path)
        assert code == 0
        split = read_split(tmp_path / "embeddings.split.json")
        assert len(split.old_classes) == 5 and len(split.new_classes) == 5

    def test_csv_import(self, tmp_path, capsys):
        rows = "\n".join(f"{i},{i * 2},{i % 2}" for i in range(20))
        (tmp_path / "x.csv").write_text(rows + "\n")
        code, _, _ = run(capsys, "gen", "--csv", tmp_path / "x.csv", "--csv-labels",
                         "--out", tmp_path)
        assert code == 0
        es = read_embeddings(tmp_path / "embeddings.emb")
        assert es.dim == 2 and es.labels.tolist() == [i % 2 for i in range(20)]


class TestMine:
    def test_tau_order(self, workdir, tmp_path, capsys):
        code, _, err = run(capsys, "mine", "--embeddings", workdir / "embeddings.emb",
                           "--tau1", 50, "--tau2", 10, "--out", tmp_path)
        assert code != 0 and "tau1 < tau2 required" in err

    def test_default_tau2(self, workdir):
        assert read_index(workdir / "neighbors.nbr").tau2 == 150

    def test_stats_csv(self, workdir):
        es = read_embeddings(workdir / "embeddings.emb")
        index = read_index(workdir / "neighbors.nbr", es)
        etas = sorted(set(eta_sweep(10)) | {70})
        assert (workdir / "stats.csv").read_text() == neighbor_stats(index, es.labels, etas).to_csv()

    def test_stats_command(self, workdir, tmp_path, capsys):
        code, _, _ = run(capsys, "stats", "--embeddings", workdir / "embeddings.emb",
                         "--neighbors", workdir / "neighbors.nbr", "--out", tmp_path)
        assert code == 0
        lines = (tmp_path / "accuracy_curve.csv").read_text().splitlines()
        assert lines[0] == "rank_fraction,same_class_rate" and lines[1] == "0.000000,1.000000"


class TestTrain:
    def test_history_rows(self, workdir, tmp_path, capsys):
        code, out, _ = run(capsys, "train", "--mode", "cluster", "--k", 4, "--epochs", 100,
                           "--batch", 128, "--lr", 1e-4, "--hidden", 32,
                           "--embeddings", workdir / "embeddings.emb",
                           "--neighbors", workdir / "neighbors.nbr", "--out", tmp_path)
        assert code == 0
        assert len((tmp_path / "history.csv").read_text().splitlines()) == 101
        assert set(json.loads(out)["metrics"]) == {"acc", "nmi", "ari", "matching"}

    def test_gcd_needs_split(self, workdir, tmp_path, capsys):
        code, _, err = run(capsys, "train", "--mode", "gcd", "--embeddings",
                           workdir / "embeddings.emb", "--neighbors", workdir / "neighbors.nbr",
                           "--out", tmp_path)
        assert code == 2 and "--split" in err

    def test_collapse_warning(self, tmp_path, capsys):
        run(capsys, "gen", "--n", 1000, "--dim", 16, "--classes", 10, "--sep", 8, "--out", tmp_path)
        run(capsys, "mine", "--out", tmp_path)
        code, _, err = run(capsys, "train", "--lambda-ent", 0, "--lambda-neg", 0, "--epochs", 50,
                           "--out", tmp_path)
        assert code == 0 and err.startswith("warning: collapse")

    def test_no_warning_with_full_loss(self, workdir, tmp_path, capsys):
        code, _, err = run(capsys, "train", "--epochs", 50, "--lr", 1e-3, "--hidden", 64,
                           "--embeddings", workdir / "embeddings.emb",
                           "--neighbors", workdir / "neighbors.nbr", "--out", tmp_path)
        assert code == 0 and err == ""

    def test_gcd_mode(self, workdir, tmp_path, capsys):
        code, out, _ = run(capsys, "train", "--mode", "gcd", *FAST,
                           "--split", workdir / "embeddings.split.json",
                           "--embeddings", workdir / "embeddings.emb",
                           "--neighbors", workdir / "neighbors.nbr", "--out", tmp_path)
        assert code == 0 and "acc_old" in json.loads(out)["metrics"]


class TestEval:
    def toy(self, tmp_path, pred):
        truth, split = TestGCD().toy()
        write_embeddings(EmbeddingSet(np.arange(20.0)[:, None], truth), tmp_path / "toy.emb")
        write_split(split, tmp_path / "toy.split.json")
        write_assignments(pred, tmp_path / "pred.csv")
        return ["--embeddings", tmp_path / "toy.emb", "--pred", tmp_path / "pred.csv",
                "--out", tmp_path]

    def test_perfect(self, tmp_path, capsys):
        truth, _ = TestGCD().toy()
        code, out, _ = run(capsys, "eval", *self.toy(tmp_path, truth))
        assert code == 0 and json.loads(out)["acc"] == 1.0

    def test_gcd_toy(self, tmp_path, capsys):
        truth, _ = TestGCD().toy()
        pred = truth.copy()
        pred[19] = 2
        code, out, _ = run(capsys, "eval", *self.toy(tmp_path, pred), "--protocol", "gcd",
                           "--split", tmp_path / "toy.split.json")
        report = json.loads(out)
        assert code == 0 and report["acc_old"] == 1.0 and report["acc_new"] == 7 / 8
        assert json.loads((tmp_path / "report.json").read_text()) == report

    def test_mismatched_n(self, tmp_path, capsys):
        args = self.toy(tmp_path, np.zeros(20, int))
        write_assignments(np.zeros(7, int), tmp_path / "pred.csv")
        code, _, err = run(capsys, "eval", *args)
        assert code == 1 and err.startswith("error: ValueError:")

    def test_model_eval(self, workdir, tmp_path, capsys):
        run(capsys, "train", *FAST, "--embeddings", workdir / "embeddings.emb",
            "--neighbors", workdir / "neighbors.nbr", "--out", tmp_path)
        code, out, _ = run(capsys, "eval", "--embeddings", workdir / "embeddings.emb",
                           "--model", tmp_path / "model.head", "--out", tmp_path)
        assert code == 0 and set(json.loads(out)) == {"acc", "nmi", "ari", "matching"}

    def test_missing_labels(self, tmp_path, capsys):
        write_embeddings(EmbeddingSet(np.zeros((3, 2))), tmp_path / "u.emb")
        write_assignments(np.zeros(3, int), tmp_path / "p.csv")
        code, _, err = run(capsys, "eval", "--embeddings", tmp_path / "u.emb", "--k", 1,
                           "--pred", tmp_path / "p.csv", "--out", tmp_path)
        assert code == 1 and "missing labels" in err


class TestKMeans:
    def test_separated(self, workdir, tmp_path, capsys):
        code, out, _ = run(capsys, "kmeans", "--embeddings", workdir / "embeddings.emb",
                           "--out", tmp_path)
        assert code == 0 and json.loads(out)["acc"] >= 0.99

    def test_single_cluster(self, workdir, tmp_path, capsys):
        es = read_embeddings(workdir / "embeddings.emb")
        _, out, _ = run(capsys, "kmeans", "--k", 1, "--embeddings", workdir / "embeddings.emb",
                        "--out", tmp_path)
        assert json.loads(out)["acc"] == np.bincount(es.labels).max() / es.n

    def test_same_seed(self, workdir, tmp_path, capsys):
        args = ["kmeans", "--seed", 5, "--embeddings", workdir / "embeddings.emb"]
        _, a, _ = run(capsys, *args, "--out", tmp_path / "a")
        _, b, _ = run(capsys, *args, "--out", tmp_path / "b")
        assert a == b
        assert (tmp_path / "a" / "kmeans.json").read_bytes() == (tmp_path / "b" / "kmeans.json").read_bytes()

    def test_n_less_than_k(self, tmp_path, capsys):
        write_embeddings(EmbeddingSet(np.zeros((2, 1)), [0, 1]), tmp_path / "e.emb")
        code, _, _ = run(capsys, "kmeans", "--k", 3, "--embeddings", tmp_path / "e.emb",
                         "--out", tmp_path)
        assert code == 1


class TestConfig:
    def test_unknown_key(self, tmp_path, capsys):
        (tmp_path / "c.cfg").write_text("n = 50\nbogus = 1\n")
        code, _, err = run(capsys, "gen", "--config", tmp_path / "c.cfg", "--out", tmp_path)
        assert code == 2 and "bogus" in err
        with pytest.raises(UsageError):
            read_config(tmp_path / "c.cfg")

    def test_cli_overrides_file(self, tmp_path, capsys):
        (tmp_path / "c.cfg").write_text("# small run\nn = 50\nclasses = 5\ndim = 3\n")
        code, out, _ = run(capsys, "gen", "--config", tmp_path / "c.cfg", "--n", 60,
                           "--out", tmp_path)
        assert code == 0 and json.loads(out)["n"] == 60 and json.loads(out)["dim"] == 3
        echoed = (tmp_path / "gen.config").read_text()
        assert "n = 60\n" in echoed and "classes = 5\n" in echoed and "dim = 3\n" in echoed

    def test_bad_value_in_file(self, tmp_path, capsys):
        (tmp_path / "c.cfg").write_text("n = -4\n")
        code, _, _ = run(capsys, "gen", "--config", tmp_path / "c.cfg", "--out", tmp_path)
        assert code == 2

    def test_echoed_config_reproduces(self, workdir, tmp_path, capsys):
        base = ["--embeddings", workdir / "embeddings.emb", "--neighbors", workdir / "neighbors.nbr"]
        assert run(capsys, "train", *FAST, "--seed", 3, *base, "--out", tmp_path / "a")[0] == 0
        echoed = tmp_path / "a" / "train.config"
        assert run(capsys, "train", "--config", echoed, "--out", tmp_path / "b")[0] == 0
        assert (tmp_path / "a" / "model.head").read_bytes() == (tmp_path / "b" / "model.head").read_bytes()


def test_smoke_pipeline(tmp_path, capsys):
    d = tmp_path
    assert run(capsys, "gen", "--n", 200, "--dim", 6, "--classes", 3, "--sep", 10, "--out", d)[0] == 0
    assert run(capsys, "mine", "--out", d)[0] == 0
    assert run(capsys, "train", "--epochs", 100, "--hidden", 64, "--lr", 1e-3,
               "--batch", 64, "--out", d)[0] == 0
    code, out, _ = run(capsys, "eval", "--out", d)
    assert code == 0 and json.loads(out)["acc"] == 1.0
    for name in ("embeddings.emb", "neighbors.nbr", "model.head", "history.csv", "report.json",
                 "gen.config", "mine.config", "train.config", "eval.config"):
        assert (d / name).exists()
