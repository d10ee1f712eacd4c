import csv
import json
import os

import numpy as np
import pytest

from lrbpfl import cli, selfcheck
from lrbpfl.config import ConfigError, ExperimentConfig, config_from_dict, load_config
from lrbpfl.data import synth_clusters, write_csv
from lrbpfl.experiment import atomic_write
from lrbpfl.metrics import CalibrationReport
from lrbpfl.numerics import RngStream

TINY = {
    "seed": 3,
    "eval_every": 2,
    "dataset": {"num_classes": 4, "dim": 5, "per_class": 40},
    "partition": {"clients": 4, "labels_per_client": 2},
    "model": {"hidden": [6]},
    "schedule": {"rounds": 3, "fraction": 0.5, "local_steps": 2, "r_max": 2, "samples": 2},
}


def write_config(tmp_path, doc=None, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(TINY if doc is None else doc))
    return str(path)


class TestConfig:
    def test_defaults_validate(self):
        ExperimentConfig().validate()

    def test_round_trip(self):
        cfg = config_from_dict(TINY)
        again = config_from_dict(json.loads(cfg.to_json()))
        assert again == cfg
        assert again.to_json() == cfg.to_json()

    def test_unknown_field_named(self):
        with pytest.raises(ConfigError, match=r"schedule\.round: unknown field"):
            config_from_dict({"schedule": {"round": 3}})

    def test_type_errors_named(self):
        with pytest.raises(ConfigError, match=r"schedule\.rounds: must be an integer"):
            config_from_dict({"schedule": {"rounds": "3"}})
        with pytest.raises(ConfigError, match=r"partition\.alpha: must be a number"):
            config_from_dict({"partition": {"alpha": True}})

    @pytest.mark.parametrize(
        "doc,field",
        [
            ({"mode": "lr_bfpl"}, "mode"),
            ({"schedule": {"threshold": 1.5}}, "schedule.threshold"),
            ({"partition": {"labels_per_client": 11}}, "partition.labels_per_client"),
            ({"partition": {"clients": 2}}, "schedule.fraction"),
            ({"model": {"hidden": [4], "masked": [True]}}, "model.masked"),
            ({"new_clients": {"count": 2}}, "new_clients.alphas"),
            ({"dataset": {"kind": "csv", "path": "/nonexistent.csv"}}, "dataset.path"),
        ],
    )
    def test_validation_names_field(self, doc, field):
        with pytest.raises(ConfigError) as info:
            config_from_dict(doc).validate()
        assert info.value.field == field

    def test_csv_path_relative_to_config(self, tmp_path):
        ds = synth_clusters(3, 2, 5, 1.0, RngStream(0))
        write_csv(ds, tmp_path / "data.csv")
        cfg = load_config(write_config(tmp_path, {"dataset": {"kind": "csv", "path": "data.csv"}}))
        assert cfg.dataset.path == str(tmp_path / "data.csv")

    def test_bad_json(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text("{nope")
        with pytest.raises(ConfigError, match="config"):
            load_config(p)


class TestRun:
    def test_smoke_artifacts(self, tmp_path, capsys):
        out = tmp_path / "out"
        assert cli.main(["run", "--config", write_config(tmp_path), "--out", str(out)]) == 0
        for name in ("config.json", "rounds.jsonl", "report.json", "ranks.csv"):
            assert (out / name).is_file()
        assert sorted(os.listdir(out / "reliability")) == [f"client_{k}.csv" for k in range(4)]
        records = [json.loads(line) for line in (out / "rounds.jsonl").read_text().splitlines()]
        assert [r["round"] for r in records] == [0, 1, 2]
        assert set(records[0]) == {"round", "mode", "mean_train_loss", "sampled_client_ids", "ranks"}
        assert "eval" in records[1] and "eval" in records[2]
        rep = CalibrationReport.from_json((out / "report.json").read_text())
        assert len(rep.clients) == 4
        with open(out / "ranks.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["client_id", "layer_index", "final_rank"]
        assert len(rows) == 1 + 4 * 2
        assert not [f for f in os.listdir(out) if f.startswith(".tmp-")]

    def test_byte_identical_reruns(self, tmp_path):
        cfg = write_config(tmp_path)
        for d in ("a", "b"):
            assert cli.main(["run", "--config", cfg, "--out", str(tmp_path / d)]) == 0
        for name in ("report.json", "rounds.jsonl", "ranks.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_seed_override_changes_report(self, tmp_path):
        cfg = write_config(tmp_path)
        cli.main(["run", "--config", cfg, "--out", str(tmp_path / "a")])
        cli.main(["run", "--config", cfg, "--seed", "4", "--out", str(tmp_path / "b")])
        saved = json.loads((tmp_path / "b" / "config.json").read_text())
        assert saved["seed"] == 4
        assert (tmp_path / "a" / "report.json").read_bytes() != (tmp_path / "b" / "report.json").read_bytes()

    def test_misspelled_mode_exit_2(self, tmp_path, capsys):
        assert cli.main(["run", "--config", write_config(tmp_path), "--mode", "lr_bfpl"]) == 2
        assert "mode" in capsys.readouterr().err

    def test_missing_config_exit_2(self, tmp_path, capsys):
        assert cli.main(["run", "--config", str(tmp_path / "none.json")]) == 2
        assert cli.main(["run"]) == 2
        assert cli.main(["frobnicate"]) == 2

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_numeric_failure_exit_3(self, tmp_path, capsys):
        doc = json.loads(json.dumps(TINY))
        doc["schedule"]["lr_mask"] = 1e6
        assert cli.main(["run", "--config", write_config(tmp_path, doc), "--out", str(tmp_path / "o")]) == 3
        err = capsys.readouterr().err
        assert "round 0" in err and "client" in err

    def test_output_env_override(self, tmp_path, monkeypatch):
        monkeypatch.setenv(cli.OUTPUT_ENV, str(tmp_path / "env_out"))
        assert cli.main(["run", "--config", write_config(tmp_path), "--mode", "fedavg"]) == 0
        assert (tmp_path / "env_out" / "report.json").is_file()
        # --out wins over the environment
        assert cli.main(["run", "--config", write_config(tmp_path), "--mode", "fedavg", "--out", str(tmp_path / "x")]) == 0
        assert (tmp_path / "x" / "report.json").is_file()


class TestCompare:
    def test_table(self, tmp_path, capsys):
        out = tmp_path / "cmp"
        rc = cli.main(["compare", "--config", write_config(tmp_path), "--out", str(out), "--modes", "lr_bpfl,lr_bpfl_no_ars"])
        assert rc == 0
        doc = json.loads((out / "compare.json").read_text())
        assert [r["mode"] for r in doc["rows"]] == ["lr_bpfl", "lr_bpfl_no_ars"]
        text = capsys.readouterr().out.splitlines()
        assert text[0].split() == ["mode", "accuracy", "a_ece", "w_ece", "worst_client"]
        assert len(text) == 4
        assert len({len(line) for line in text}) == 1

    def test_empty_modes_exit_2(self, tmp_path):
        assert cli.main(["compare", "--config", write_config(tmp_path), "--modes", ""]) == 2
        assert cli.main(["compare", "--config", write_config(tmp_path), "--modes", "nope"]) == 2


class TestSelfcheck:
    def test_ensemble_passes(self, capsys):
        assert cli.main(["selfcheck", "ensemble"]) == 0
        assert capsys.readouterr().out.startswith("[PASS] ensemble")

    def test_failure_exit_1_names_quantity(self, monkeypatch, capsys):
        bad = selfcheck.CheckResult("grad", False, 0.5, "analytic 1.0 vs numeric 1.5 at W[layer 0]")
        monkeypatch.setitem(selfcheck.CHECKS, "grad", lambda seed=0: bad)
        assert cli.main(["selfcheck", "grad"]) == 1
        assert "W[layer 0]" in capsys.readouterr().out

    def test_unknown_kind(self):
        assert cli.main(["selfcheck", "hessian"]) == 2


class TestAtomicWrite:
    def test_replaces_whole_file(self, tmp_path):
        p = tmp_path / "r.json"
        atomic_write(str(p), "old")
        atomic_write(str(p), "new")
        assert p.read_text() == "new"
        assert os.listdir(tmp_path) == ["r.json"]

    def test_failed_write_keeps_previous(self, tmp_path, monkeypatch):
        p = tmp_path / "r.json"
        atomic_write(str(p), '{"ok": 1}')

        def boom(src, dst):
            raise OSError("disk gone")

        monkeypatch.setattr(os, "replace", boom)
        with pytest.raises(OSError):
            atomic_write(str(p), '{"ok": 2, "truncated')
        assert json.loads(p.read_text()) == {"ok": 1}
        assert os.listdir(tmp_path) == ["r.json"]


def test_new_client_outputs(tmp_path):
    doc = json.loads(json.dumps(TINY))
    doc["dataset"]["per_class"] = 80
    doc["new_clients"] = {"count": 2, "alphas": [0.5, 1.0]}
    out = tmp_path / "nc"
    assert cli.main(["run", "--config", write_config(tmp_path, doc), "--out", str(out)]) == 0
    reports = json.loads((out / "new_clients.json").read_text())
    assert sorted(reports) == ["0.5", "1.0"]
    assert all(len(r["clients"]) == 2 for r in reports.values())
    assert all(np.isfinite(r["a_ece"]) for r in reports.values())


@pytest.mark.parametrize("name", ["smoke.json", "hetero.json", "new_clients.json"])
def test_bundled_configs_validate(name):
    path = os.path.join(os.path.dirname(__file__), os.pardir, "configs", name)
    cfg = load_config(path)
    assert config_from_dict(json.loads(cfg.to_json())) == cfg
