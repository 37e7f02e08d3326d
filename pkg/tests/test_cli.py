import json

import numpy as np
import pytest

from grurec.cli import main

SMALL = ["--hidden", "24,16", "--batch-size", "16", "--patience", "15", "--no-timing"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def json_lines(out):
    return [json.loads(line) for line in out.splitlines() if line.strip()]


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("synth")
    assert main(["synth", "--classes", "4", "--train-per-class", "12", "--test-per-class", "6", "--dim", "4",
                 "--out-dir", str(d), "--seed", "3"]) == 0
    return d


@pytest.fixture(scope="module")
def trained(synth_dir):
    out = synth_dir / "m.dgru"
    assert main(["train", "--data", str(synth_dir / "synth_train.jsonl"), "--out", str(out), "--seed", "42",
                 "--epochs", "60"] + SMALL) == 0
    return out


def test_synth_outputs(synth_dir):
    lines = (synth_dir / "synth_train.jsonl").read_text().splitlines()
    assert len(lines) == 48
    assert len((synth_dir / "synth_test.jsonl").read_text().splitlines()) == 24


def test_train_writes_artifacts(trained):
    assert trained.exists()
    manifest = json.loads(trained.with_name("m.dgru.manifest.json").read_text())
    assert manifest["seed"] == 42
    assert manifest["train_config"]["lr"] == 1e-3
    assert manifest["model_config"]["encoder_widths"] == [24, 16]
    assert all(len(h) == 64 for h in manifest["inputs"].values())
    history = trained.with_name("m.dgru.history.jsonl").read_text().splitlines()
    assert set(json.loads(history[0])) == {"epoch", "train_loss", "train_acc", "val_acc", "elapsed_s"}


def test_batch_size_one_is_config_error(synth_dir, tmp_path, capsys):
    code, _, err = run(capsys, "train", "--data", synth_dir / "synth_train.jsonl", "--out", tmp_path / "m", "--batch-size", "1")
    assert code == 2
    assert "batch_size" in err


def test_bad_flag_value_is_config_error(synth_dir, tmp_path, capsys):
    with pytest.raises(SystemExit) as ei:
        main(["train", "--data", str(synth_dir / "synth_train.jsonl"), "--out", str(tmp_path / "m"), "--attention", "maybe"])
    assert ei.value.code == 2


def test_ablation_variant_recorded(synth_dir, tmp_path, capsys):
    out = tmp_path / "abl.dgru"
    code, _, _ = run(capsys, "train", "--data", synth_dir / "synth_train.jsonl", "--out", out, "--stacks", "3",
                     "--fc", "1", "--attention", "off", "--epochs", "2", "--batch-size", "16", "--no-timing")
    assert code == 0
    m = json.loads(out.with_name("abl.dgru.manifest.json").read_text())
    assert m["variant"] == {"stacks": 3, "fc": 1, "attention": "off"}
    assert m["model_config"]["encoder_widths"] == [512, 256, 128]
    assert m["model_config"]["use_attention"] is False and m["model_config"]["fc_count"] == 1


def test_missing_data_file(tmp_path, capsys):
    code, _, err = run(capsys, "train", "--data", tmp_path / "nope.jsonl", "--out", tmp_path / "m")
    assert code == 3


def test_malformed_data_names_line(tmp_path, capsys):
    p = tmp_path / "bad.jsonl"
    p.write_text('{"label": "a", "frames": [[1, 2]]}\n{"label": "a", "frames": [[1, 2], [3]]}\n')
    code, _, err = run(capsys, "train", "--data", p, "--out", tmp_path / "m")
    assert code == 3
    assert "line 2" in err


def test_eval_json(trained, synth_dir, capsys):
    code, out, _ = run(capsys, "eval", "--model", trained, "--data", synth_dir / "synth_test.jsonl")
    assert code == 0
    m = json.loads(out)
    assert set(m) == {"accuracy", "per_class", "confusion", "loss"}
    assert 0 <= m["accuracy"] <= 1
    conf = np.array(m["confusion"])
    assert conf.shape == (4, 4) and conf.dtype.kind == "i" and conf.min() >= 0


def test_eval_on_training_set_consistent_with_history(trained, synth_dir, capsys):
    history = [json.loads(x) for x in trained.with_name("m.dgru.history.jsonl").read_text().splitlines()]
    code, out, _ = run(capsys, "eval", "--model", trained, "--data", synth_dir / "synth_train.jsonl")
    assert json.loads(out)["accuracy"] >= history[-1]["train_acc"] - 0.01


def test_eval_dim_mismatch(trained, tmp_path, capsys):
    p = tmp_path / "wrong.jsonl"
    p.write_text('{"label": "g0", "frames": [[1, 2, 3]]}\n')
    code, _, err = run(capsys, "eval", "--model", trained, "--data", p)
    assert code == 3


def test_predict_lines(trained, synth_dir, capsys):
    code, out, _ = run(capsys, "predict", "--model", trained, "--input", synth_dir / "synth_test.jsonl")
    assert code == 0
    rows = json_lines(out)
    assert len(rows) == 24
    for r in rows:
        assert set(r) == {"id", "label", "probs"}
        assert abs(sum(r["probs"]) - 1) < 1e-5
    code2, out2, _ = run(capsys, "predict", "--model", trained, "--input", synth_dir / "synth_test.jsonl")
    assert out2 == out


def test_predict_without_labels(trained, tmp_path, capsys):
    p = tmp_path / "nolabel.jsonl"
    p.write_text('{"id": "q", "frames": [[1, 2, 3, 4], [2, 3, 4, 5]]}\n')
    code, out, _ = run(capsys, "predict", "--model", trained, "--input", p)
    assert code == 0 and json_lines(out)[0]["id"] == "q"


def test_predict_wrong_dim_message(trained, tmp_path, capsys):
    p = tmp_path / "wrong.jsonl"
    p.write_text('{"id": "q", "frames": [[1, 2, 3]]}\n')
    code, _, err = run(capsys, "predict", "--model", trained, "--input", p)
    assert code == 3
    assert "3" in err and "N=4" in err


def test_corrupt_checkpoint(trained, synth_dir, tmp_path, capsys):
    bad = tmp_path / "bad.dgru"
    bad.write_bytes(b"XXXX" + trained.read_bytes()[4:])
    code, _, err = run(capsys, "eval", "--model", bad, "--data", synth_dir / "synth_test.jsonl")
    assert code == 3 and "magic" in err


def test_seed_env_override(synth_dir, tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("GRUREC_SEED", "777")
    out = tmp_path / "env.dgru"
    code, _, _ = run(capsys, "train", "--data", synth_dir / "synth_train.jsonl", "--out", out, "--seed", "1",
                     "--epochs", "1", *SMALL)
    assert code == 0
    assert json.loads(out.with_name("env.dgru.manifest.json").read_text())["seed"] == 777


def test_train_is_byte_reproducible(synth_dir, tmp_path, capsys):
    outs = []
    for i in range(2):
        out = tmp_path / f"r{i}.dgru"
        assert run(capsys, "train", "--data", synth_dir / "synth_train.jsonl", "--out", out, "--epochs", "3", *SMALL)[0] == 0
        outs.append(out)
    assert outs[0].read_bytes() == outs[1].read_bytes()
    h = [o.with_name(o.name + ".history.jsonl").read_bytes() for o in outs]
    assert h[0] == h[1]


def test_gradcheck_passes(capsys):
    code, out, _ = run(capsys, "gradcheck", "--trials", "1")
    assert code == 0
    report = json.loads(out)
    names = [c["component"] for c in report["components"]]
    assert len(names) == len(set(names))
    assert {"gru_cell", "gru_layer", "attention", "batchnorm_train", "dropout", "dense", "cross_entropy", "model"} <= set(names)
    assert all(c["max_rel_error"] < 1e-4 for c in report["components"])


def test_gradcheck_detects_fault(capsys):
    code, out, err = run(capsys, "gradcheck", "--trials", "1", "--perturb", "gru_layer")
    assert code == 1
    assert "gru_layer" in err
    failed = [c["component"] for c in json.loads(out)["components"] if not c["passed"]]
    assert failed == ["gru_layer"]


@pytest.fixture(scope="module")
def subjects_file(tmp_path_factory):
    d = tmp_path_factory.mktemp("subj")
    assert main(["synth", "--classes", "3", "--train-per-class", "4", "--test-per-class", "0", "--dim", "3",
                 "--subjects", "3", "--out-dir", str(d), "--seed", "5"]) == 0
    return d / "synth_train.jsonl"


def test_protocol_t_report(subjects_file, capsys):
    argv = ["protocol-t", "--data", subjects_file, "--T", "2", "--seed", "9", "--epochs", "3", "--hidden", "8",
            "--batch-size", "4", "--no-timing"]
    code, out, _ = run(capsys, *argv)
    assert code == 0
    rep = json.loads(out)
    assert rep["n_participants"] == 3 == len({p["subject"] for p in rep["participants"]})
    assert all(p["n_train"] == 6 and p["n_test"] == 6 for p in rep["participants"])
    assert 0 <= rep["mean_accuracy"] <= 1
    _, out2, _ = run(capsys, *argv)
    assert out2 == out


def test_protocol_t_insufficient(subjects_file, capsys):
    code, _, err = run(capsys, "protocol-t", "--data", subjects_file, "--T", "4", "--epochs", "1")
    assert code == 3
    assert "T=4" in err
