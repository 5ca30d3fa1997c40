import hashlib
import json
import re

import pytest

from dentalxr.cli import RunConfig, main
from dentalxr.dataset import FoldPlan, read_index
from dentalxr.evaluation import read_confusion, read_metrics
from dentalxr.labels import CLASS_NAMES
from dentalxr.synthetic import write_radiograph_dataset

SMOKE = ["--image-size", "32", "--filters", "8,16", "--dense-units", "16", "--epochs", "3", "--k", "3",
         "--n-trees", "10", "--quiet"]
ERROR_RE = re.compile(r'^dentalxr: error code=(\d) kind=(\S+) path=("(?:[^"\\]|\\.)*") message=(".*")$')


@pytest.fixture(scope="module")
def manifest(tmp_path_factory):
    return write_radiograph_dataset(tmp_path_factory.mktemp("syn"), counts=(16, 14, 12, 10), seed=3)


def _error(capsys):
    lines = [ln for ln in capsys.readouterr().err.splitlines() if ln.startswith("dentalxr: error")]
    assert len(lines) == 1
    m = ERROR_RE.match(lines[0])
    assert m, lines[0]
    return int(m.group(1)), m.group(2), json.loads(m.group(3)), json.loads(m.group(4))


def _digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_split_is_byte_identical(manifest, tmp_path):
    out = tmp_path / "w"
    assert main(["preprocess", "--manifest", str(manifest), "--out", str(out), *SMOKE]) == 0
    assert main(["balance", "--out", str(out), "--seed", "42", "--quiet"]) == 0
    assert main(["split", "--k", "5", "--seed", "42", "--out", str(out), "--quiet"]) == 0
    first = (out / "folds.csv").read_bytes()
    assert main(["split", "--k", "5", "--seed", "42", "--out", str(out), "--quiet"]) == 0
    assert (out / "folds.csv").read_bytes() == first
    plan = FoldPlan.load(out / "folds.csv")
    assert plan.k == 5 and sum(plan.fold_sizes()) == 40


def test_balance_equalises_classes(manifest, tmp_path):
    out = tmp_path / "w"
    main(["preprocess", "--manifest", str(manifest), "--out", str(out), *SMOKE])
    main(["balance", "--out", str(out), "--quiet"])
    samples = read_index(out / "balanced.csv")
    assert [sum(s.label == c for s in samples) for c in range(4)] == [10, 10, 10, 10]
    assert all(s.load().shape == (32, 32) for s in samples)


def test_run_all_cnn_rf_smoke(manifest, tmp_path):
    out = tmp_path / "run"
    assert main(["run-all", "--manifest", str(manifest), "--out", str(out), "--pipeline", "cnn_rf", *SMOKE]) == 0
    rows = read_metrics(out / "metrics.txt")
    for name in CLASS_NAMES + ("macro",):
        assert set(rows[name]) == {"precision", "recall", "f1", "accuracy"}
        for mean, std in rows[name].values():
            assert 0 <= mean <= 1 and std >= 0
    assert read_confusion(out / "confusion.csv").sum() == 40
    for fold in range(3):
        assert (out / f"history_fold{fold}.csv").is_file()
        assert (out / "models" / f"rf_fold{fold}.manifest").is_file()
    config = (out / "run_config.run-all.txt").read_text()
    assert "pipeline=cnn_rf\n" in config and "n_trees=10\n" in config and "lr=0.001\n" in config


def test_run_all_is_reproducible(manifest, tmp_path):
    for name in ("a", "b"):
        assert main(["run-all", "--manifest", str(manifest), "--out", str(tmp_path / name), "--pipeline", "cnn",
                     *SMOKE]) == 0
    for f in ("metrics.txt", "confusion.csv", "folds.csv", "balanced.csv", "history_fold0.csv"):
        assert _digest(tmp_path / "a" / f) == _digest(tmp_path / "b" / f), f


def test_steps_match_run_all(manifest, tmp_path):
    common = ["--pipeline", "cnn_svm", *SMOKE]
    assert main(["run-all", "--manifest", str(manifest), "--out", str(tmp_path / "all"), *common]) == 0
    out = str(tmp_path / "steps")
    assert main(["preprocess", "--manifest", str(manifest), "--out", out, *common]) == 0
    for cmd in ("balance", "split", "train", "extract-features", "train-hybrid", "evaluate", "report"):
        assert main([cmd, "--out", out, *common]) == 0, cmd
    for f in ("metrics.txt", "confusion.csv"):
        assert (tmp_path / "all" / f).read_bytes() == (tmp_path / "steps" / f).read_bytes()
    assert (tmp_path / "steps" / "run_config.train-hybrid.txt").is_file()


def test_single_fold_train(manifest, tmp_path):
    out = tmp_path / "w"
    main(["preprocess", "--manifest", str(manifest), "--out", str(out), *SMOKE])
    main(["balance", "--out", str(out), "--quiet"])
    main(["split", "--out", str(out), *SMOKE])
    assert main(["train", "--out", str(out), "--fold", "1", *SMOKE]) == 0
    assert sorted(p.name for p in (out / "models").iterdir()) == ["cnn_fold1.bin", "cnn_fold1.manifest"]


def test_missing_manifest(tmp_path, capsys):
    target = tmp_path / "nope" / "manifest.jsonl"
    assert main(["run-all", "--manifest", str(target), "--out", str(tmp_path / "o"), "--quiet"]) == 3
    code, kind, path, _ = _error(capsys)
    assert (code, kind) == (3, "missing-input")
    assert path == str(target)


def test_missing_artifact_names_path(tmp_path, capsys):
    assert main(["balance", "--out", str(tmp_path), "--quiet"]) == 3
    _, _, path, _ = _error(capsys)
    assert path == str(tmp_path / "samples.csv")


def test_unknown_flag_is_usage_error(capsys):
    assert main(["split", "--bogus"]) == 2
    assert _error(capsys)[:2] == (2, "usage")


def test_unknown_subcommand(capsys):
    assert main(["fly"]) == 2
    assert _error(capsys)[0] == 2


def test_invalid_config_value(tmp_path, capsys):
    assert main(["split", "--out", str(tmp_path), "--k", "1", "--quiet"]) == 4
    assert _error(capsys)[:2] == (4, "invalid-input")


def test_config_file_and_flag_precedence(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# smoke settings\nepochs=7\nbatch-size=4\nseed=9\n")
    assert main(["make-synthetic", "--out", str(tmp_path), "--config", str(cfg), "--seed", "2", "--quiet"]) == 0
    text = (tmp_path / "run_config.make-synthetic.txt").read_text()
    assert "epochs=7\n" in text and "batch_size=4\n" in text and "seed=2\n" in text


def test_config_file_errors(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("colour=blue\n")
    assert main(["split", "--out", str(tmp_path), "--config", str(cfg)]) == 4
    code, kind, path, message = _error(capsys)
    assert kind == "invalid-config" and path == str(cfg) and "colour" in message
    assert main(["split", "--out", str(tmp_path), "--config", str(tmp_path / "none.cfg")]) == 3


def test_pretrained_defaults_in_run_config(tmp_path):
    assert main(["make-synthetic", "--out", str(tmp_path), "--pipeline", "vgg16", "--quiet"]) == 0
    text = (tmp_path / "run_config.make-synthetic.txt").read_text()
    assert "lr=0.0001\n" in text and "batch_size=8\n" in text and "k=5\n" in text


def test_hybrid_step_rejects_plain_pipeline(manifest, tmp_path, capsys):
    assert main(["train-hybrid", "--out", str(tmp_path), "--pipeline", "cnn", "--quiet"]) == 4


def test_inputs_not_mutated(manifest, tmp_path):
    before = {p: _digest(p) for p in manifest.parent.rglob("*") if p.is_file()}
    main(["run-all", "--manifest", str(manifest), "--out", str(tmp_path / "o"), *SMOKE])
    assert {p: _digest(p) for p in manifest.parent.rglob("*") if p.is_file()} == before


def test_threads_and_deterministic_flags(manifest, tmp_path):
    out = tmp_path / "o"
    assert main(["preprocess", "--manifest", str(manifest), "--out", str(out), "--threads", "1", *SMOKE]) == 0
    assert main(["balance", "--out", str(out), "--deterministic", "--quiet"]) == 0
    assert "deterministic=true\n" in (out / "run_config.balance.txt").read_text()


def test_run_config_defaults():
    cfg = RunConfig().validate()
    train = cfg.train_config()
    assert (train.learning_rate, train.batch_size, train.epochs, train.patience) == (1e-3, 16, 30, 5)
    assert (cfg.k, cfg.n_trees, cfg.min_samples_split, cfg.svm_c, cfg.dense_units, cfg.dropout) == (5, 100, 2, 1.0, 256, 0.3)
    assert cfg.filters == (32, 64, 128, 256) and cfg.image_size == 224
