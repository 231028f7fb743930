import csv
import math

import numpy as np
import pytest
from scipy import stats

from clid import cli, ranker
from clid.errors import TrainingDivergence
from clid.metrics import MetricsReport

TINY = ["--num-queries", "20", "--docs", "5-8", "--feat-dim", "4"]
FAST = ["--epochs", "2", "--hidden", "6", "--batch-lists", "4"]


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("gen") / "d"
    assert cli.main(["gen", *TINY, "--out", str(out)]) == 0
    return out


class TestGen:
    def test_files_and_proportions(self, dataset):
        qids = {}
        for name in ("train.txt", "vali.txt", "test.txt"):
            qids[name] = {line.split()[1] for line in (dataset / name).read_text().splitlines()}
        assert [len(v) for v in qids.values()] == [12, 4, 4]
        assert not (qids["train.txt"] & qids["vali.txt"]) and not (qids["vali.txt"] & qids["test.txt"])
        meta = (dataset / "meta.txt").read_text()
        assert "weight=" in meta and "context_weight=" in meta and "seed=0" in meta

    def test_byte_identical(self, dataset, tmp_path):
        cli.main(["gen", *TINY, "--out", str(tmp_path)])
        for name in ("train.txt", "vali.txt", "test.txt", "meta.txt"):
            assert (tmp_path / name).read_bytes() == (dataset / name).read_bytes()

    def test_env_output_root(self, tmp_path, monkeypatch):
        monkeypatch.setenv(cli.OUTPUT_ENV, str(tmp_path))
        assert cli.main(["gen", *TINY]) == 0
        assert (tmp_path / "gen" / "train.txt").exists()


class TestRun:
    def test_base_single_trial(self, dataset, tmp_path):
        assert cli.main(["run", "--data", str(dataset), "--method", "base", "--trials", "1",
                         *FAST, "--out", str(tmp_path)]) == 0
        trials = rows(tmp_path / "trials.csv")
        assert len(trials) == 1 and trials[0]["seed"] == "0"
        agg = {r["metric"]: r for r in rows(tmp_path / "aggregate.csv")}
        assert float(agg["ndcg10"]["mean"]) == float(trials[0]["ndcg10"])
        assert (tmp_path / "trial_0" / "log.csv").read_text().startswith("epoch,split,ndcg10")

    def test_ci_recomputes_from_rows(self, dataset, tmp_path):
        assert cli.main(["run", "--data", str(dataset), "--method", "base", "--trials", "5",
                         "--seed", "10", *FAST, "--out", str(tmp_path)]) == 0
        trials = rows(tmp_path / "trials.csv")
        assert [r["seed"] for r in trials] == ["10", "11", "12", "13", "14"]
        vals = np.array([float(r["ndcg10"]) for r in trials])
        agg = {r["metric"]: r for r in rows(tmp_path / "aggregate.csv")}
        half = stats.t.ppf(0.975, 4) * vals.std(ddof=1) / math.sqrt(5)
        assert float(agg["ndcg10"]["ci95_halfwidth"]) == pytest.approx(half, rel=1e-12)
        # per-trial rows reparse to the exact in-memory values
        rep = MetricsReport.from_row(trials[0])
        assert rep.ndcg10 == vals[0]

    def test_checkpoints_and_manifest(self, dataset, tmp_path):
        cli.main(["run", "--data", str(dataset), "--method", "pal", "--trials", "1", *FAST,
                  "--out", str(tmp_path)])
        tdir = tmp_path / "trial_0"
        assert "method=pal" in (tdir / "manifest.txt").read_text()
        main = ranker.read_params(tdir / "main.pfdr")
        shallow = ranker.read_params(tdir / "shallow.pfdr")
        assert main.layer_dims == (4, 6, 1) and shallow.layer_dims[0] == 4

    def test_config_file_and_override(self, dataset, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text(f"# tiny run\ndata={dataset}\nmethod=clid\ntrials=3\nepochs=2\nhidden=6\n")
        out = tmp_path / "o"
        assert cli.main(["--config", str(cfg), "run", "--trials", "1", "--out", str(out)]) == 0
        trials = rows(out / "trials.csv")
        assert len(trials) == 1 and trials[0]["method"] == "clid"
        assert "teacher=teacher.pfdr" in (out / "trial_0" / "manifest.txt").read_text()

    def test_divergence_keeps_partial_results(self, dataset, tmp_path, monkeypatch):
        real = cli.run_method
        calls = []

        def flaky(*a, **kw):
            calls.append(1)
            if len(calls) == 2:
                raise TrainingDivergence("boom")
            return real(*a, **kw)

        monkeypatch.setattr(cli, "run_method", flaky)
        code = cli.main(["run", "--data", str(dataset), "--method", "base", "--trials", "3",
                         *FAST, "--out", str(tmp_path)])
        assert code == cli.EXIT_DIVERGED
        assert len(rows(tmp_path / "trials.csv")) == 1
        assert (tmp_path / "aggregate.csv").exists()

    def test_bad_trials(self, dataset, tmp_path):
        assert cli.main(["run", "--data", str(dataset), "--trials", "0", "--out", str(tmp_path)]) != 0


def test_probe(tmp_path):
    out = tmp_path / "probe.csv"
    assert cli.main(["probe", "--trials", "100", "--out", str(out)]) == 0
    table = {r["loss"]: r for r in rows(out)}
    assert float(table["clid"]["max_grad_norm"]) < 1e-8
    assert float(table["pointwise"]["max_grad_norm"]) == 0.0
    assert float(table["listnet"]["max_grad_norm"]) > 1e-2
    assert float(table["listmle"]["descent_fraction"]) >= 0.99


def test_sweep(dataset, tmp_path):
    grid = "0.001,0.01,0.1,1,10,100,1000,10000"
    assert cli.main(["sweep", "--data", str(dataset), "--grid", grid, *FAST, "--out", str(tmp_path)]) == 0
    out = rows(tmp_path / "sweep.csv")
    assert [float(r["ratio"]) for r in out] == [float(g) for g in grid.split(",")]
    assert all(float(r["neg_logloss"]) < 0 for r in out)


def test_sweep_neg_logloss_is_exact(dataset, tmp_path, monkeypatch):
    rep = MetricsReport(0.5, 0.6931471805599453, 0.1, None, 1, 1, 1)
    monkeypatch.setattr(cli, "weight_ratio_sweep", lambda *a, **k: [(1.0, rep), (10.0, None)])
    monkeypatch.setattr(cli, "train_teacher", lambda *a, **k: type("R", (), {"params": None}))
    cli.main(["sweep", "--data", str(dataset), *FAST, "--out", str(tmp_path)])
    out = rows(tmp_path / "sweep.csv")
    assert float(out[0]["neg_logloss"]) == -rep.logloss
    assert out[1]["ndcg10"] == ""


class TestEval:
    def write(self, path, header, body):
        path.write_text(",".join(header) + "\n" + "\n".join(",".join(map(str, r)) for r in body) + "\n")

    def test_with_users(self, tmp_path, capsys):
        p = tmp_path / "pred.csv"
        body = [(1, "A", 1, 0.9), (1, "A", 0, 0.1), (2, "B", 1, 0.5), (2, "B", 0, 0.5),
                (3, "B", 1, 0.5), (3, "B", 0, 0.5)]
        self.write(p, ["qid", "user_id", "label", "prediction"], body)
        assert cli.main(["eval", str(p), "--out", str(tmp_path / "rep.txt")]) == 0
        rep = MetricsReport.from_kv((tmp_path / "rep.txt").read_text())
        assert rep.gauc == pytest.approx(2 / 3, abs=1e-12)
        assert (rep.n_queries, rep.n_samples, rep.n_users) == (3, 6, 2)
        assert "gauc=" in capsys.readouterr().out

    def test_without_users(self, tmp_path, capsys):
        p = tmp_path / "pred.csv"
        self.write(p, ["qid", "label", "prediction"], [(7, 0, 0.9), (7, 1, 0.1), (8, 1, 0.4)])
        assert cli.main(["eval", str(p)]) == 0
        rep = MetricsReport.from_kv(capsys.readouterr().out)
        assert rep.gauc is None and rep.n_queries == 2

    def test_missing_column(self, tmp_path):
        p = tmp_path / "pred.csv"
        self.write(p, ["qid", "prediction"], [(1, 0.5)])
        assert cli.main(["eval", str(p)]) == cli.EXIT_ERROR
