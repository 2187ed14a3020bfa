import json
import subprocess
import sys

import numpy as np
import pytest

from lkgr import cli
from lkgr import evaluation as ev
from lkgr import graph as g
from lkgr import training as tr

FAST = ["--dim", "6", "--epochs", "3", "--batch-size", "64", "--sample-size", "3", "--seed", "1"]


def write_raw(tmp_path, kg_text, ui_text):
    kg, ui = tmp_path / "kg.tsv", tmp_path / "ui.tsv"
    kg.write_text(kg_text, encoding="utf-8")
    ui.write_text(ui_text, encoding="utf-8")
    return kg, ui


@pytest.fixture(scope="module")
def bundle(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    kg, inter = g.make_synthetic(seed=0)
    raw_kg, raw_ui = root / "kg.tsv", root / "ui.tsv"
    raw_kg.write_text("".join(f"{h}\t{r}\t{t}\n" for h, r, t in kg.triples.tolist()))
    raw_ui.write_text("".join(f"{u}\t{i}\t1\n" for u, i in inter.pairs.tolist()))
    assert cli.main(["ingest", "--kg", str(raw_kg), "--interactions", str(raw_ui), "--out", str(root / "b")]) == 0
    return root / "b"


@pytest.fixture(scope="module")
def run(bundle, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert cli.main(["train", "--bundle", str(bundle), "--out", str(out), *FAST]) == 0
    return out


class TestIngest:
    def test_toy_counts(self, tmp_path, capsys):
        kg, ui = write_raw(tmp_path, "0\t0\t1\n", "0\t0\n")
        assert cli.main(["ingest", "--kg", str(kg), "--interactions", str(ui), "--out", str(tmp_path / "b")]) == 0
        summary = json.loads(capsys.readouterr().out)
        assert {k: summary[k] for k in ("users", "items", "entities", "relations")} == {
            "users": 1, "items": 1, "entities": 2, "relations": 2}
        assert json.loads((tmp_path / "b" / "bundle.json").read_text())["summary"] == summary

    def test_malformed_line(self, tmp_path, capsys):
        kg, ui = write_raw(tmp_path, "0\t0\t1\n0\tx\t2\n", "0\t0\n")
        assert cli.main(["ingest", "--kg", str(kg), "--interactions", str(ui), "--out", str(tmp_path / "b")]) == 2
        assert "kg.tsv:2:" in capsys.readouterr().err

    def test_unknown_item(self, tmp_path, capsys):
        kg, ui = write_raw(tmp_path, "0\t0\t1\n", "0\t0\n0\t5\n")
        assert cli.main(["ingest", "--kg", str(kg), "--interactions", str(ui), "--out", str(tmp_path / "b")]) == 2
        assert "5" in capsys.readouterr().err

    def test_idempotent(self, tmp_path):
        kg, ui = write_raw(tmp_path, "0\t0\t1\n1\t1\t2\n", "0\t0\t5\n1\t0\t3\n")
        outs = []
        for name in ("b1", "b2"):
            args = ["ingest", "--kg", str(kg), "--interactions", str(ui), "--threshold", "4", "--out", str(tmp_path / name)]
            assert cli.main(args) == 0
            outs.append({p.name: p.read_bytes() for p in sorted((tmp_path / name).iterdir())})
        assert outs[0] == outs[1]
        assert outs[0]["interactions.tsv"] == b"0\t0\n"

    def test_alignment(self, tmp_path, capsys):
        kg, ui = write_raw(tmp_path, "3\t0\t4\n", "0\t100\n")
        (tmp_path / "al.tsv").write_text("100\t3\n")
        args = ["ingest", "--kg", str(kg), "--interactions", str(ui), "--alignment", str(tmp_path / "al.tsv"),
                "--out", str(tmp_path / "b")]
        assert cli.main(args) == 0
        assert cli.load_bundle(tmp_path / "b")[2] == {100: 3}


class TestTrainEval:
    def test_run_directory(self, run):
        names = {p.name for p in run.iterdir()}
        assert {"config.json", "history.jsonl", "metrics.jsonl", "summary.csv", "checkpoint.npz"} <= names
        resolved = json.loads((run / "config.json").read_text())
        assert resolved["train"]["seed"] == 1 and resolved["train"]["dim"] == 6
        assert resolved["version"]

    def test_history_contents(self, run):
        hist = ev.read_jsonl(run / "history.jsonl")
        epochs = [r for r in hist if r["split"] == "eval"]
        tests = [r for r in hist if r["split"] == "test"]
        assert [r["epoch"] for r in epochs] == [1, 2, 3]
        assert [r["K"] for r in tests] == list(ev.DEFAULT_K)
        for r in epochs:
            assert {"loss", "recall", "ndcg", "curvature"} <= set(r)

    def test_eval_reproduces_final_metrics(self, run, tmp_path, capsys):
        assert cli.main(["eval", "--checkpoint", str(run / "checkpoint.npz"), "--out", str(tmp_path)]) == 0
        assert ev.read_jsonl(tmp_path / "eval_metrics.jsonl") == ev.read_jsonl(run / "metrics.jsonl")
        assert len(capsys.readouterr().out.strip().splitlines()) == 6

    def test_single_k(self, run, tmp_path):
        assert cli.main(["eval", "--checkpoint", str(run / "checkpoint.npz"), "--k", "20", "--out", str(tmp_path)]) == 0
        rows = ev.read_jsonl(tmp_path / "eval_metrics.jsonl")
        assert [r["K"] for r in rows] == [20]
        assert (tmp_path / "eval_summary.csv").read_text().count("\n") == 2

    def test_same_seed_same_bytes(self, bundle, run, tmp_path):
        assert cli.main(["train", "--bundle", str(bundle), "--out", str(tmp_path), *FAST]) == 0
        for name in ("history.jsonl", "metrics.jsonl", "summary.csv", "checkpoint.npz"):
            assert (tmp_path / name).read_bytes() == (run / name).read_bytes()

    def test_zero_epochs_saves_initial_params(self, bundle, tmp_path):
        assert cli.main(["train", "--bundle", str(bundle), "--out", str(tmp_path), *FAST, "--epochs", "0"]) == 0
        ck = tr.load_checkpoint(tmp_path / "checkpoint.npz")
        data = cli.Dataset(bundle, 1)
        init = tr.init_params(data.ukg.n_nodes, data.ukg.n_relation_types, ck.config.model_config(), np.random.default_rng(1))
        for k in init:
            np.testing.assert_array_equal(ck.params[k], init[k])

    def test_flat_variant(self, bundle, tmp_path):
        assert cli.main(["train", "--bundle", str(bundle), "--out", str(tmp_path), *FAST, "--ablate", "hg"]) == 0
        ck = tr.load_checkpoint(tmp_path / "checkpoint.npz")
        assert ck.config.ablate == ("hg",)
        assert not ck.config.model_config().switches.use_hyperbolic

    def test_mismatched_bundle(self, run, tmp_path, capsys):
        kg, ui = write_raw(tmp_path, "0\t0\t1\n", "0\t0\n")
        cli.main(["ingest", "--kg", str(kg), "--interactions", str(ui), "--out", str(tmp_path / "tiny")])
        code = cli.main(["eval", "--checkpoint", str(run / "checkpoint.npz"), "--bundle", str(tmp_path / "tiny")])
        assert code == 2 and "trained on" in capsys.readouterr().err

    def test_recommend(self, run, capsys):
        assert cli.main(["recommend", "--checkpoint", str(run / "checkpoint.npz"), "--user", "0", "--k", "5"]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert lines[0] == "item\tscore" and len(lines) == 6
        assert cli.main(["recommend", "--checkpoint", str(run / "checkpoint.npz"), "--user", "999"]) == 2


class TestConfig:
    def test_preset_and_overrides(self, tmp_path):
        (tmp_path / "c.json").write_text(json.dumps({"dim": 12, "eta": 0.01, "k": [5]}))
        args = cli.build_parser().parse_args(["train", "--dataset-preset", "movie", "--config", str(tmp_path / "c.json"), "--dim", "7"])
        cfg, run = cli.resolve_run_config(args)
        assert (cfg.dim, cfg.eta, cfg.depth, cfg.batch_size) == (7, 0.01, 2, 4096)
        assert run["k"] == [5] and run["dataset_preset"] == "movie"

    def test_default_preset(self):
        cfg, run = cli.resolve_run_config(cli.build_parser().parse_args(["train"]))
        assert cfg == tr.PRESETS["book"] and run["k"] == list(ev.DEFAULT_K)

    def test_unknown_key(self, tmp_path, capsys):
        (tmp_path / "c.json").write_text(json.dumps({"learning_rate": 1}))
        assert cli.main(["train", "--config", str(tmp_path / "c.json")]) == 2
        assert "learning_rate" in capsys.readouterr().err

    def test_bad_k(self):
        with pytest.raises(cli.UsageError):
            cli._parse_k("5,x")

    def test_missing_bundle(self, tmp_path):
        assert cli.main(["train", "--bundle", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == 2


class TestDiagnostics:
    def test_gradcheck_passes(self, capsys):
        assert cli.main(["gradcheck", "--aggregator", "sum", "--depth", "1"]) == 0
        out = capsys.readouterr().out
        assert "PASS" in out and "theta=" in out

    def test_degree_stats(self, bundle, tmp_path):
        assert cli.main(["degree-stats", "--bundle", str(bundle), "--out", str(tmp_path / "d.csv")]) == 0
        lines = (tmp_path / "d.csv").read_text().splitlines()
        assert lines[0] == "degree,count"
        kg, inter, _ = cli.load_bundle(bundle)
        total = sum(int(l.split(",")[1]) for l in lines[1:])
        assert total == g.build_ukg(kg, inter).n_nodes

    def test_module_entry_point(self):
        out = subprocess.run([sys.executable, "-m", "lkgr", "--version"], capture_output=True, text=True)
        assert out.returncode == 0 and out.stdout.startswith("lkgr ")

    def test_log_level(self, bundle, tmp_path):
        env_run = subprocess.run(
            [sys.executable, "-m", "lkgr", "train", "--bundle", str(bundle), "--out", str(tmp_path), *FAST, "--epochs", "1"],
            capture_output=True, text=True, env={**__import__("os").environ, "LKGR_LOG": "INFO"},
        )
        assert env_run.returncode == 0 and "epoch 1" in env_run.stderr
