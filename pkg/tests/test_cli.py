import json

import pytest

from contextshot.cli import dispatch
from contextshot import configio


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    """A small on-disk dataset generated through the CLI itself."""
    root = tmp_path_factory.mktemp("data")
    code = dispatch([
        "gen-shapes", "--out", str(root), "--classes", "6", "--per-class", "8",
        "--size", "16", "--seed", "1",
    ])
    assert code == 0
    return root / "images"


@pytest.fixture(scope="module")
def encoder_ckpt(tmp_path_factory, data_dir):
    out = tmp_path_factory.mktemp("pretrain")
    code = dispatch([
        "pretrain", "--data", str(data_dir), "--out", str(out), "--seed", "2",
        "--epochs", "2", "--embed-dim", "8", "--image-size", "16",
        "--classes-per-batch", "4", "--samples-per-class", "2", "--no-augment",
    ])
    assert code == 0
    return out / "encoder.ckpt"


def train_args(data_dir, out, extra=()):
    return [
        "train", "--data", str(data_dir), "--out", str(out), "--seed", "3",
        "--regime", "frozen", "--holdout-classes", "3", "--image-size", "16",
        "--embed-dim", "8", "--epochs", "2", "--samples-per-epoch", "8",
        "--batch-size", "4", "--n", "3", "--k", "1", "--icl-layers", "1",
        "--icl-heads", "2", "--icl-feedforward", "16",
        "--warmup-epochs", "1", "--plateau-epochs", "1",
        "--val-every", "1", "--val-episodes", "4",
        *extra,
    ]


@pytest.fixture(scope="module")
def train_run(tmp_path_factory, data_dir, encoder_ckpt):
    out = tmp_path_factory.mktemp("train")
    code = dispatch(train_args(data_dir, out, ["--encoder-ckpt", str(encoder_ckpt)]))
    assert code == 0
    return out


def test_gen_shapes_outputs(data_dir):
    classes = sorted(p.name for p in data_dir.iterdir())
    assert len(classes) == 6
    assert sum(1 for _ in data_dir.rglob("*.png")) == 48
    run_dir = data_dir.parent
    assert (run_dir / "resolved_config.json").exists()
    assert (run_dir / "manifest.json").exists()


def test_gen_shapes_deterministic(tmp_path):
    for sub in ("a", "b"):
        assert dispatch(["gen-shapes", "--out", str(tmp_path / sub), "--classes", "3",
                         "--per-class", "2", "--size", "16", "--seed", "9"]) == 0
    ma = configio.read_json(tmp_path / "a" / "manifest.json")["files"]
    mb = configio.read_json(tmp_path / "b" / "manifest.json")["files"]
    images_a = {k: v for k, v in ma.items() if k.startswith("images/")}
    images_b = {k: v for k, v in mb.items() if k.startswith("images/")}
    assert images_a and images_a == images_b


def test_pretrain_outputs(encoder_ckpt):
    run_dir = encoder_ckpt.parent
    assert encoder_ckpt.exists()
    assert (encoder_ckpt.parent / (encoder_ckpt.name + ".json")).exists()
    lines = (run_dir / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 2
    record = json.loads(lines[0])
    assert set(record) == {"epoch", "loss_class", "loss_triplet", "loss_total", "val_top1", "lr"}


def test_train_outputs(train_run):
    assert (train_run / "checkpoints" / "last.ckpt").exists()
    assert (train_run / "checkpoints" / "best.ckpt").exists()
    assert (train_run / "metrics.jsonl").exists()
    resolved = configio.read_json(train_run / "resolved_config.json")
    assert resolved["regime"] == "frozen"
    assert resolved["epochs"] == 2


def test_train_repeat_byte_identical(tmp_path, data_dir, encoder_ckpt):
    outs = []
    for sub in ("r1", "r2"):
        out = tmp_path / sub
        assert dispatch(train_args(data_dir, out, ["--encoder-ckpt", str(encoder_ckpt)])) == 0
        outs.append(out)
    m1 = (outs[0] / "metrics.jsonl").read_bytes()
    m2 = (outs[1] / "metrics.jsonl").read_bytes()
    assert m1 == m2


def test_eval_report_and_determinism(tmp_path, data_dir, train_run):
    model = train_run / "checkpoints" / "last.ckpt"
    reports = []
    for name in ("r1.json", "r2.json"):
        code = dispatch([
            "eval", "--model", str(model), "--data", str(data_dir), "--n", "3", "--k", "1",
            "--tasks", "20", "--seed", "7", "--out", str(tmp_path / name),
        ])
        assert code == 0
        reports.append((tmp_path / name).read_bytes())
    assert reports[0] == reports[1]
    payload = json.loads(reports[0])
    assert payload["tasks"] == 20
    assert payload["predictor"] == "icl"
    assert 0.0 <= payload["mean_acc"] <= 1.0


def test_eval_knn_baseline(tmp_path, data_dir, encoder_ckpt):
    code = dispatch([
        "eval", "--predictor", "knn", "--encoder-ckpt", str(encoder_ckpt),
        "--data", str(data_dir), "--n", "3", "--k", "2", "--tasks", "10",
        "--seed", "5", "--out", str(tmp_path / "knn.json"),
    ])
    assert code == 0
    assert json.loads((tmp_path / "knn.json").read_text())["predictor"] == "knn"


def test_sweep_outputs(tmp_path, data_dir, train_run):
    model = train_run / "checkpoints" / "last.ckpt"
    out = tmp_path / "sweep"
    code = dispatch([
        "sweep", "--model", str(model), "--data", str(data_dir), "--n", "3",
        "--k-min", "1", "--k-max", "2", "--tasks", "10", "--seed", "4", "--out", str(out),
    ])
    assert code == 0
    lines = (out / "sweep.csv").read_text().splitlines()
    assert lines[0] == "k,mean_acc,std_err"
    assert len(lines) == 3
    assert (out / "sweep.svg").exists()


def test_inspect_ok_and_tamper(tmp_path, train_run):
    assert dispatch(["inspect", "--run", str(train_run)]) == 0
    victim = train_run / "metrics.jsonl"
    original = victim.read_bytes()
    try:
        victim.write_bytes(original + b"tampered\n")
        assert dispatch(["inspect", "--run", str(train_run)]) == 1
    finally:
        victim.write_bytes(original)
    assert dispatch(["inspect", "--run", str(train_run)]) == 0


def test_unknown_flag_exits_one():
    assert dispatch(["gen-shapes", "--bogus-flag", "1"]) == 1


def test_unknown_command_exits_one():
    assert dispatch(["frobnicate"]) == 1


def test_no_command_exits_one():
    assert dispatch([]) == 1


def test_missing_model_is_runtime_failure(tmp_path, data_dir):
    code = dispatch([
        "eval", "--model", str(tmp_path / "absent.ckpt"), "--data", str(data_dir),
        "--n", "3", "--k", "1", "--tasks", "5", "--out", str(tmp_path / "r.json"),
    ])
    assert code == 2


def test_config_file_and_flag_override(tmp_path):
    config = tmp_path / "cfg.json"
    config.write_text(json.dumps({"classes": 4, "per_class": 2, "size": 16, "seed": 3}))
    out = tmp_path / "run"
    assert dispatch(["gen-shapes", "--config", str(config), "--out", str(out), "--classes", "5"]) == 0
    resolved = configio.read_json(out / "resolved_config.json")
    assert resolved["classes"] == 5      # flag wins
    assert resolved["per_class"] == 2    # config file value kept
    assert len(list((out / "images").iterdir())) == 5


def test_unknown_config_key_rejected(tmp_path):
    config = tmp_path / "cfg.json"
    config.write_text(json.dumps({"classez": 4}))
    assert dispatch(["gen-shapes", "--config", str(config), "--out", str(tmp_path / "x")]) == 1


def test_out_env_var_default(tmp_path, monkeypatch):
    monkeypatch.setenv("CONTEXTSHOT_OUT", str(tmp_path))
    assert dispatch(["gen-shapes", "--classes", "3", "--per-class", "1", "--size", "16", "--seed", "1"]) == 0
    assert (tmp_path / "shapes" / "images").exists()


def test_out_required_without_env(monkeypatch):
    monkeypatch.delenv("CONTEXTSHOT_OUT", raising=False)
    assert dispatch(["gen-shapes", "--classes", "3", "--per-class", "1", "--size", "16", "--seed", "1"]) == 1
