import json

import pytest

from sawmotion import cli

SMALL = {"seed": 3, "dataset": {"n_specs": 30}, "saw": {"d_model": 8, "n_heads": 2, "mlp_hidden": 8},
         "train": {"max_epochs": 1}}
TASKS = [{"family": "squat", "difficulty": 1.0, "duration_s": 4.0, "seed": 0},
         {"family": "walk", "difficulty": 0.2, "duration_s": 4.0, "seed": 1}]


def write_json(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    conf = write_json(root / "config.json", SMALL)
    assert run("gen-data", "--config", conf, "--out", root / "data") == 0
    assert run("train", "--config", conf, "--data", root / "data", "--out", root / "m.json") == 0
    write_json(root / "tasks.json", TASKS)
    return root, conf


class TestConfig:
    def test_defaults(self):
        cfg = cli.parse_config({})
        assert cfg.seed == 0 and cfg.saw.T_f == 50 and cfg.dataset.n_specs == 1500

    def test_horizon_sets_window(self):
        assert cli.parse_config({"saw": {"horizon_seconds": 3.0}}).saw.T_f == 150

    def test_split_fractions_named(self):
        with pytest.raises(cli.ConfigError) as e:
            cli.parse_config({"dataset": {"splits": {"train": 0.7, "val": 0.1, "test": 0.1}}})
        assert e.value.field == "dataset.splits" and "sum" in str(e.value)

    @pytest.mark.parametrize("d, field", [({"seed": -1}, "seed"), ({"saw": {"d_model": 10, "n_heads": 4}}, "saw"),
                                          ({"bogus": {}}, "<root>"), ({"adapter": {"horizon_s": 5}}, "adapter"),
                                          ({"saw": {"S": 4}}, "saw.S"), ({"dataset": {"n_specs": 0}},
                                                                         "dataset.n_specs")])
    def test_errors_name_field(self, d, field):
        with pytest.raises(cli.ConfigError) as e:
            cli.parse_config(d)
        assert e.value.field == field

    def test_env_config(self, tmp_path, monkeypatch):
        monkeypatch.setenv("SAW_CONFIG", write_json(tmp_path / "c.json", {"seed": 42}))
        assert cli.load_config(None).seed == 42

    def test_adapter_seed_substream(self):
        assert cli.parse_config({"seed": 1}).adapter_seed != cli.parse_config({"seed": 2}).adapter_seed
        assert cli.parse_config({"adapter": {"seed": 9}}).adapter_seed == 9


class TestExitCodes:
    def test_usage_error(self):
        with pytest.raises(SystemExit) as e:
            run("gen-data")
        assert e.value.code == 1

    def test_bad_split_exits_1(self, tmp_path, capsys):
        conf = write_json(tmp_path / "c.json", {"dataset": {"splits": {"train": 0.5, "val": 0.1, "test": 0.1}}})
        assert run("gen-data", "--config", conf, "--out", tmp_path / "o") == 1
        assert "dataset.splits" in capsys.readouterr().err

    def test_invalid_json_config(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text("{nope")
        assert run("gen-data", "--config", p, "--out", tmp_path / "o") == 1

    def test_missing_config_file(self, tmp_path):
        assert run("gen-data", "--config", tmp_path / "absent.json", "--out", tmp_path / "o") == 2

    def test_unwritable_output(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("")
        assert run("gen-data", "--out", blocker / "sub") == 2

    def test_missing_checkpoint(self, work):
        root, conf = work
        assert run("adapt", "--config", conf, "--ckpt", root / "absent.json", "--tasks", root / "tasks.json") == 2

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_numeric_failure(self, work):
        root, _ = work
        conf = write_json(root / "hot.json", {**SMALL, "train": {"max_epochs": 1, "lr": 1e300}})
        assert run("train", "--config", conf, "--data", root / "data", "--out", root / "hot_m.json") == 3

    def test_rank_out_of_range(self, work):
        root, conf = work
        assert run("rank", "--config", conf, "--ckpt", root / "m.json", "--task", json.dumps(TASKS[1]),
                   "--t", 5) == 1


class TestGenData:
    def test_files_and_stats(self, work):
        root, _ = work
        for split in ("train", "val", "test"):
            stats = json.loads((root / "data" / f"{split}.stats.json").read_text())
            assert {"count", "fall_fraction", "per_family", "before_balancing", "digest"} <= set(stats)
        assert json.loads((root / "data" / "val.stats.json").read_text())["fall_fraction"] == pytest.approx(0.5,
                                                                                                            abs=0.05)
        assert json.loads((root / "data" / "config.json").read_text())["seed"] == 3

    def test_deterministic(self, work, tmp_path):
        root, conf = work
        assert run("gen-data", "--config", conf, "--out", tmp_path / "again") == 0
        for name in ("train.jsonl", "val.jsonl", "test.jsonl", "train.stats.json"):
            assert (tmp_path / "again" / name).read_bytes() == (root / "data" / name).read_bytes()

    def test_seed_flag_changes_data(self, work, tmp_path):
        root, conf = work
        assert run("gen-data", "--config", conf, "--seed", 4, "--out", tmp_path / "s4") == 0
        assert (tmp_path / "s4" / "train.jsonl").read_bytes() != (root / "data" / "train.jsonl").read_bytes()

    def test_no_spec_leakage(self, work):
        root, _ = work
        seeds = {}
        for split in ("train", "val", "test"):
            with open(root / "data" / f"{split}.jsonl") as f:
                seeds[split] = {json.loads(line)["meta"]["seed"] for line in f}
        assert not (seeds["train"] & seeds["val"] or seeds["train"] & seeds["test"] or seeds["val"] & seeds["test"])


class TestTrainEval:
    def test_checkpoint_and_log(self, work):
        root, _ = work
        assert set(json.loads((root / "m.json").read_text())) == {"config", "norm_stats", "params"}
        log = json.loads((root / "m.log.json").read_text())
        assert {"config", "train_digest", "history"} <= set(log)

    def test_eval_report(self, work, capsys):
        root, conf = work
        assert run("eval", "--config", conf, "--ckpt", root / "m.json", "--data", root / "data" / "test.jsonl",
                   "--out", root / "eval.json") == 0
        report = json.loads((root / "eval.json").read_text())
        (row,) = report["rows"]
        assert set(row["metrics"]) == {"fall_accuracy", "a_q", "a_qd", "a_qdd", "a_p", "a_theta"}
        assert row["variant"] == "full" and row["horizon_s"] == 1.0

    def test_eval_grid(self, work):
        root, conf = work
        assert run("eval", "--config", conf, "--ckpt", root / "m.json", "--data", root / "data" / "test.jsonl",
                   "--train-data", root / "data", "--variant-grid", "full,no_ref", "--max-epochs", 1,
                   "--out", root / "grid.json") == 0
        rows = json.loads((root / "grid.json").read_text())["rows"]
        assert [r["variant"] for r in rows] == ["full", "no_ref"]

    def test_eval_grid_needs_train_data(self, work):
        root, conf = work
        assert run("eval", "--config", conf, "--ckpt", root / "m.json", "--data", root / "data" / "test.jsonl",
                   "--variant-grid", "full") == 1

    def test_train_deterministic(self, work, tmp_path):
        root, conf = work
        assert run("train", "--config", conf, "--data", root / "data", "--out", tmp_path / "m.json") == 0
        assert (tmp_path / "m.json").read_bytes() == (root / "m.json").read_bytes()


class TestRank:
    def rows(self, capsys):
        return [json.loads(line) for line in capsys.readouterr().out.splitlines()]

    def test_single_option_is_incumbent(self, work, capsys):
        root, conf = work
        assert run("rank", "--config", conf, "--ckpt", root / "m.json", "--task", json.dumps(TASKS[1]),
                   "--t", 50, "--n", 1) == 0
        (row,) = self.rows(capsys)
        assert row["incumbent"] and row["rank"] == 0 and row["index"] == 0

    def test_listing(self, work, capsys, tmp_path):
        root, conf = work
        assert run("rank", "--config", conf, "--ckpt", root / "m.json", "--task", json.dumps(TASKS[1]),
                   "--t", 50, "--n", 5, "--out", tmp_path / "r") == 0
        rows = self.rows(capsys)
        assert len(rows) == 5 and sum(r["incumbent"] for r in rows) == 1
        scal = [r["scalar"] for r in rows]
        assert scal == sorted(scal)
        assert len(list((tmp_path / "r").glob("candidate_*.json"))) == 5

    def test_after_fall(self, work):
        root, conf = work
        assert run("rank", "--config", conf, "--ckpt", root / "m.json", "--task", json.dumps(TASKS[0]),
                   "--t", 140) == 1


class TestAdapt:
    def test_baseline_only_deterministic(self, work, tmp_path):
        root, conf = work
        for name in ("a", "b"):
            assert run("adapt", "--config", conf, "--tasks", root / "tasks.json", "--baseline-only",
                       "--out", tmp_path / name) == 0
        for f in ("traces.jsonl", "report.json"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
        report = json.loads((tmp_path / "a" / "report.json").read_text())
        assert report["mode"] == "baseline" and report["baseline_falls"] >= 1

    def test_saw_report(self, work, tmp_path):
        root, conf = work
        assert run("adapt", "--config", conf, "--ckpt", root / "m.json", "--tasks", root / "tasks.json",
                   "--out", tmp_path / "s") == 0
        report = json.loads((tmp_path / "s" / "report.json").read_text())
        assert {"prevented_fraction", "baseline_falls", "adapted_falls", "mean_root_rmse", "n_tasks"} <= set(report)
        lines = (tmp_path / "s" / "traces.jsonl").read_text().splitlines()
        assert len(lines) == 2
        assert {"task", "ticks", "final"} <= set(json.loads(lines[0]))

    def test_bad_tasks(self, work, tmp_path):
        root, conf = work
        bad = write_json(tmp_path / "t.json", [{"family": "fly", "difficulty": 0.1}])
        assert run("adapt", "--config", conf, "--tasks", bad, "--baseline-only") == 1
