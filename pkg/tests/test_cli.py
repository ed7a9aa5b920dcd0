import csv
import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest

from switchtab import cli
from switchtab.evaluate import auc, train_probe
from switchtab.model import FORMAT_VERSION, SwitchTabModel

FAST = {"d_model": 4, "n_layers": 1, "n_heads": 2, "d_ff": 8, "batch_size": 32}


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def write_config(path, **values):
    path.write_text(json.dumps(values), encoding="utf-8")
    return path


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture()
def synth_dir(tmp_path, capsys):
    cfg = write_config(tmp_path / "synth.json", n=100, class_dims=4, shared_dims=4, seed=7)
    code, _, _ = run(capsys, "synth", "--config", cfg, "--out", tmp_path / "data")
    assert code == 0
    return tmp_path / "data"


@pytest.fixture()
def pretrained(tmp_path, synth_dir, capsys):
    cfg = write_config(tmp_path / "pre.json", data=str(synth_dir / "data.csv"), schema=str(synth_dir / "schema.json"),
                       pretrain_epochs=1, **FAST)
    code, _, err = run(capsys, "pretrain", "--config", cfg, "--out", tmp_path / "run")
    assert code == 0, err
    return tmp_path / "run", synth_dir


class TestSynth:
    def test_shape(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.json", n=500, class_dims=4, shared_dims=4, separation=2.0, noise=0.3, seed=7)
        assert run(capsys, "synth", "--config", cfg, "--out", tmp_path)[0] == 0
        with open(tmp_path / "data.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        assert len(rows) == 501 and len(rows[0]) == 9
        assert rows[0][-1] == "label"
        labels = [int(r[-1]) for r in rows[1:]]
        assert labels.count(0) == labels.count(1) == 250
        schema = json.loads((tmp_path / "schema.json").read_text())
        kinds = [c["kind"] for c in schema["columns"]]
        assert kinds == ["numerical"] * 8 + ["label"]

    def test_same_seed_identical(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.json", n=50, seed=3)
        run(capsys, "synth", "--config", cfg, "--out", tmp_path / "a")
        run(capsys, "synth", "--config", cfg, "--out", tmp_path / "b")
        for name in ("data.csv", "schema.json"):
            assert digest(tmp_path / "a" / name) == digest(tmp_path / "b" / name)

    def test_class_means(self):
        _, values, labels = cli.synthesize(4000, 2, 2, separation=2.0, noise=0.3, seed=0)
        np.testing.assert_allclose(values[labels == 1, :2].mean(axis=0), 1.0, atol=0.03)
        np.testing.assert_allclose(values[labels == 0, :2].mean(axis=0), -1.0, atol=0.03)
        np.testing.assert_allclose(values[:, :2].std(axis=0), np.sqrt(1 + 0.09), atol=0.05)
        np.testing.assert_allclose(values[labels == 1, 2:].mean(axis=0), 0.0, atol=0.06)

    def test_zero_separation_is_chance(self):
        aucs = []
        for seed in range(10):
            _, values, labels = cli.synthesize(400, 4, 4, separation=0.0, noise=0.3, seed=seed)
            half = 200
            probe = train_probe(values[:half], labels[:half])
            aucs.append(auc(probe.predict_proba(values[half:])[:, 1], labels[half:]))
        assert abs(np.mean(aucs) - 0.5) < 0.1

    def test_invalid(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.json", n=3)
        assert run(capsys, "synth", "--config", cfg, "--out", tmp_path)[0] == 1


class TestPretrain:
    def test_checkpoint_round_trip(self, pretrained, capsys):
        run_dir, _ = pretrained
        doc = json.loads((run_dir / "checkpoint.json").read_text())
        assert doc["format_version"] == FORMAT_VERSION and doc["stage"] == "pretrain"
        model = SwitchTabModel.from_dict(doc)
        again = SwitchTabModel.from_dict(json.loads(json.dumps(model.to_dict())))
        for name, p in model.params.items():
            assert p.data.tobytes() == again[name].data.tobytes()
        log_lines = (run_dir / "pretrain_log.csv").read_text().splitlines()
        assert log_lines[0] == "epoch,recon_recovered,recon_switched,cls,total,val_metric"
        assert len(log_lines) == 2
        assert not [p for p in run_dir.iterdir() if p.name.endswith(".tmp")]

    def test_label_assisted_without_label(self, tmp_path, synth_dir, capsys):
        schema = json.loads((synth_dir / "schema.json").read_text())
        schema["columns"] = [c for c in schema["columns"] if c["kind"] != "label"]
        (tmp_path / "nolabel.json").write_text(json.dumps(schema))
        cfg = write_config(tmp_path / "c.json", data=str(synth_dir / "data.csv"), schema=str(tmp_path / "nolabel.json"),
                           pretrain_epochs=1, label_assisted=True, **FAST)
        code, _, err = run(capsys, "pretrain", "--config", cfg, "--out", tmp_path / "x")
        assert code == 1
        assert "label" in err
        assert not (tmp_path / "x" / "checkpoint.json").exists()

    def test_no_switch_drops_column(self, tmp_path, synth_dir, capsys):
        cfg = write_config(tmp_path / "c.json", data=str(synth_dir / "data.csv"), schema=str(synth_dir / "schema.json"),
                           pretrain_epochs=1, **FAST)
        assert run(capsys, "pretrain", "--config", cfg, "--no-switch", "--out", tmp_path / "ns")[0] == 0
        header = (tmp_path / "ns" / "pretrain_log.csv").read_text().splitlines()[0]
        assert "recon_switched" not in header.split(",")

    def test_flags_override_config(self, tmp_path, synth_dir, capsys):
        cfg = write_config(tmp_path / "c.json", data=str(synth_dir / "data.csv"), schema=str(synth_dir / "schema.json"),
                           pretrain_epochs=1, alpha=1.0, ratio=0.3, seed=0, **FAST)
        run(capsys, "pretrain", "--config", cfg, "--alpha", 0.5, "--ratio", 0.6, "--seed", 9, "--out", tmp_path / "o")
        doc = json.loads((tmp_path / "o" / "checkpoint.json").read_text())
        assert doc["train_config"]["alpha"] == 0.5
        assert doc["train_config"]["ratio"] == 0.6
        assert doc["train_config"]["seed"] == 9

    def test_inputs_untouched(self, tmp_path, synth_dir, capsys):
        before = digest(synth_dir / "data.csv")
        cfg = write_config(tmp_path / "c.json", data=str(synth_dir / "data.csv"), schema=str(synth_dir / "schema.json"),
                           pretrain_epochs=1, **FAST)
        run(capsys, "pretrain", "--config", cfg, "--out", tmp_path / "o")
        assert digest(synth_dir / "data.csv") == before

    def test_unknown_config_key(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.json", epochs=3)
        code, _, err = run(capsys, "pretrain", "--config", cfg)
        assert code == 1 and "epochs" in err

    def test_missing_data_file(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.json", data=str(tmp_path / "nope.csv"), schema=str(tmp_path / "nope.json"))
        assert run(capsys, "pretrain", "--config", cfg)[0] == 1


class TestDownstream:
    def config(self, tmp_path, run_dir, synth_dir, **extra):
        return write_config(tmp_path / "d.json", data=str(synth_dir / "data.csv"), schema=str(synth_dir / "schema.json"),
                            checkpoint=str(run_dir / "checkpoint.json"), **{**FAST, **extra})

    def test_embed(self, tmp_path, pretrained, capsys):
        run_dir, synth_dir = pretrained
        cfg = self.config(tmp_path, run_dir, synth_dir)
        assert run(capsys, "embed", "--config", cfg, "--out", tmp_path / "emb")[0] == 0
        with open(tmp_path / "emb" / "embeddings.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        assert len(rows) == 101
        assert len(rows[0]) == 1 + 24 + 1 and rows[0][-1] == "label"

    def test_finetune_and_eval(self, tmp_path, pretrained, capsys):
        run_dir, synth_dir = pretrained
        cfg = self.config(tmp_path, run_dir, synth_dir, finetune_epochs=3)
        code, out, err = run(capsys, "finetune", "--config", cfg, "--out", tmp_path / "ft")
        assert code == 0, err
        assert (tmp_path / "ft" / "finetune_log.csv").exists()
        cfg = write_config(tmp_path / "e.json", data=str(synth_dir / "data.csv"), schema=str(synth_dir / "schema.json"),
                           checkpoint=str(tmp_path / "ft" / "finetuned.json"), kind="accuracy")
        code, out, _ = run(capsys, "eval", "--config", cfg)
        result = json.loads(out)
        assert code == 0 and result["metric"] == "accuracy" and result["n"] == 100
        assert 0.0 <= result["value"] <= 1.0

    def test_eval_predictions_file(self, tmp_path, capsys):
        (tmp_path / "p.csv").write_text("label,score\n1,0.9\n0,0.1\n")
        cfg = write_config(tmp_path / "e.json", predictions=str(tmp_path / "p.csv"), kind="auc")
        code, out, _ = run(capsys, "eval", "--config", cfg)
        assert code == 0
        assert json.loads(out) == {"metric": "auc", "value": 1.0, "n": 2}

    def test_project(self, tmp_path, pretrained, capsys):
        run_dir, synth_dir = pretrained
        cfg = self.config(tmp_path, run_dir, synth_dir)
        assert run(capsys, "project", "--config", cfg, "--out", tmp_path / "pr")[0] == 0
        for name in ("s", "m"):
            lines = (tmp_path / "pr" / f"projection_{name}.csv").read_text().splitlines()
            assert lines[0] == "row_id,pc1,pc2,group" and len(lines) == 101
            assert 'viewBox="0 0 800 600"' in (tmp_path / "pr" / f"projection_{name}.svg").read_text()

    def test_schema_mismatch_exit_2(self, tmp_path, pretrained, capsys):
        run_dir, synth_dir = pretrained
        schema = json.loads((synth_dir / "schema.json").read_text())
        schema["columns"][0], schema["columns"][1] = schema["columns"][1], schema["columns"][0]
        (tmp_path / "swapped.json").write_text(json.dumps(schema))
        cfg = write_config(tmp_path / "d.json", data=str(synth_dir / "data.csv"), schema=str(tmp_path / "swapped.json"),
                           checkpoint=str(run_dir / "checkpoint.json"))
        assert run(capsys, "embed", "--config", cfg, "--out", tmp_path / "x")[0] == 2

    def test_corrupt_checkpoint_exit_3(self, tmp_path, pretrained, capsys):
        run_dir, synth_dir = pretrained
        bad = tmp_path / "bad.json"
        bad.write_text((run_dir / "checkpoint.json").read_text()[:500])
        cfg = write_config(tmp_path / "d.json", data=str(synth_dir / "data.csv"), schema=str(synth_dir / "schema.json"),
                           checkpoint=str(bad))
        assert run(capsys, "embed", "--config", cfg, "--out", tmp_path / "x")[0] == 3

    def test_higher_format_version_exit_3(self, tmp_path, pretrained, capsys):
        run_dir, synth_dir = pretrained
        doc = json.loads((run_dir / "checkpoint.json").read_text())
        doc["format_version"] = FORMAT_VERSION + 1
        newer = tmp_path / "newer.json"
        newer.write_text(json.dumps(doc))
        cfg = write_config(tmp_path / "d.json", data=str(synth_dir / "data.csv"), schema=str(synth_dir / "schema.json"),
                           checkpoint=str(newer))
        code, _, err = run(capsys, "embed", "--config", cfg, "--out", tmp_path / "x")
        assert code == 3 and "format_version" in err


def test_gradcheck_command(capsys):
    code, out, _ = run(capsys, "gradcheck")
    report = json.loads(out)
    assert code == 0
    assert report["passed"] and report["max_rel_error"] < 1e-4


def test_bad_usage_exits_1(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["teleport"])
    assert exc.value.code == 1


def test_console_script_module(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "switchtab.cli", "synth", "--out", str(tmp_path), "--seed", "1"],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert json.loads(proc.stdout)["rows"] == 500
