import csv

import pytest

from bevuncert.cli import main
from bevuncert.gate import EGO_FEATURES


def _run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_help(capsys):
    assert _run(capsys, "--help")[0] == 0


def test_train_requires_config(capsys):
    code, _, err = _run(capsys, "train")
    assert code == 1
    assert "usage:" in err and "--config" in err


def test_unknown_flag(capsys):
    code, _, err = _run(capsys, "gen-data", "--colour", "blue")
    assert code == 1 and "usage:" in err


def test_unknown_command(capsys):
    assert _run(capsys, "fly")[0] == 1


def test_bad_config_is_validation_error(capsys, tmp_path):
    bad = tmp_path / "bad.ini"
    bad.write_text("[model]\nnope = 1\n", encoding="utf-8")
    code, _, err = _run(capsys, "gen-data", "--config", bad, "--out", tmp_path)
    assert code == 1 and "nope" in err


def test_gen_data_is_deterministic(capsys, tiny_ini, tmp_path):
    for d in ("a", "b"):
        assert _run(capsys, "gen-data", "--config", tiny_ini, "--seed", 1, "--out", tmp_path / d)[0] == 0
    for name in ("train.jsonl", "test.jsonl"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    _run(capsys, "gen-data", "--config", tiny_ini, "--seed", 2, "--out", tmp_path / "c")
    assert (tmp_path / "a" / "train.jsonl").read_bytes() != (tmp_path / "c" / "train.jsonl").read_bytes()


@pytest.fixture
def trained(capsys, tiny_ini, tmp_path):
    data = tmp_path / "data"
    assert _run(capsys, "gen-data", "--config", tiny_ini, "--out", data)[0] == 0
    assert _run(capsys, "train", "--config", tiny_ini, "--data", data, "--out", tmp_path / "run")[0] == 0
    return data, tmp_path / "run"


def test_train_outputs(trained):
    _, run = trained
    assert (run / "model.ckpt").exists()
    assert (run / "train_log.csv").read_text(encoding="utf-8").startswith("stage,epoch,loss")
    assert "[model]" in (run / "config.ini").read_text(encoding="utf-8")


def test_train_twice_same_checkpoint(capsys, trained, tiny_ini, tmp_path):
    data, run = trained
    assert _run(capsys, "train", "--config", tiny_ini, "--data", data, "--out", tmp_path / "again")[0] == 0
    for name in ("model.ckpt", "train_log.csv"):
        assert (run / name).read_bytes() == (tmp_path / "again" / name).read_bytes()


def test_eval_is_deterministic_across_workers(capsys, trained, tiny_ini, tmp_path):
    data, run = trained
    for w in (1, 3):
        code, out, _ = _run(capsys, "eval", "--config", tiny_ini, "--checkpoint", run / "model.ckpt",
                            "--data", data, "--workers", w, "--out", tmp_path / f"e{w}")
        assert code == 0 and "epdms_lite" in out
    a = (tmp_path / "e1" / "metrics.csv").read_bytes()
    assert a == (tmp_path / "e3" / "metrics.csv").read_bytes()
    assert a.startswith(b"metric,horizon,value\n")


def test_eval_rejects_mismatched_checkpoint(capsys, trained, tiny_ini, tmp_path):
    data, run = trained
    other = tmp_path / "other.ini"
    other.write_text(tiny_ini.read_text(encoding="utf-8").replace("hidden_sizes = 11", "hidden_sizes = 13"),
                     encoding="utf-8")
    code, _, err = _run(capsys, "eval", "--config", other, "--checkpoint", run / "model.ckpt", "--data", data,
                        "--out", tmp_path)
    assert code == 1 and "does not match" in err


def test_gate_dump(capsys, trained, tiny_ini, tmp_path):
    data, run = trained
    code, _, _ = _run(capsys, "gate-dump", "--config", tiny_ini, "--checkpoint", run / "model.ckpt", "--data", data,
                      "--scenes", "scene-0008,9", "--out", tmp_path / "g")
    assert code == 0
    for idx in (8, 9):
        with open(tmp_path / "g" / f"gate_scene-{idx:04d}.csv", newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["feature", "t", "t-1", "t-2", "t-3"]
        assert [r[0] for r in rows[1:]] == list(EGO_FEATURES)
        assert all(0 < float(v) < 1 for r in rows[1:] for v in r[1:])


def test_gate_dump_unknown_scene(capsys, trained, tiny_ini, tmp_path):
    data, run = trained
    code, _, err = _run(capsys, "gate-dump", "--config", tiny_ini, "--checkpoint", run / "model.ckpt",
                        "--data", data, "--scenes", "scene-0999", "--out", tmp_path)
    assert code == 1 and "scene-0999" in err


def test_corrupt_dataset(capsys, trained, tiny_ini, tmp_path):
    data, run = trained
    (data / "test.jsonl").write_text('{"schema": 1}\n{"index": \n', encoding="utf-8")
    code, _, err = _run(capsys, "eval", "--config", tiny_ini, "--checkpoint", run / "model.ckpt", "--data", data,
                        "--out", tmp_path)
    assert code == 1 and "line 2" in err


def test_divergence_is_runtime_error(capsys, tiny_ini, tmp_path):
    hot = tmp_path / "hot.ini"
    hot.write_text(tiny_ini.read_text(encoding="utf-8").replace("learning_rate = 1e-3", "learning_rate = 1e6"),
                   encoding="utf-8")
    with pytest.warns(RuntimeWarning):
        code, _, err = _run(capsys, "train", "--config", hot, "--out", tmp_path)
    assert code == 2 and "runtime error" in err


def test_gradcheck_single_seed(capsys, tmp_path):
    code, out, _ = _run(capsys, "gradcheck", "--seed", 7, "--n-seeds", 1, "--out", tmp_path)
    assert code == 0
    assert out.count("ok") == 10 and "FAIL" not in out
    assert (tmp_path / "gradcheck.csv").read_text(encoding="utf-8").startswith("check,seed,max_rel_error\n")


def test_bench(capsys, tiny_ini, tmp_path):
    code, out, _ = _run(capsys, "bench", "--config", tiny_ini, "--n-iters", 100, "--repetitions", 2, "--out", tmp_path)
    assert code == 0
    rows = dict(line.split(",") for line in (tmp_path / "bench.csv").read_text(encoding="utf-8").split()[1:])
    assert rows["params_delta"] == rows["params_delta_expected"]


def test_bench_rejects_few_iterations(capsys, tiny_ini, tmp_path):
    assert _run(capsys, "bench", "--config", tiny_ini, "--n-iters", 5, "--out", tmp_path)[0] == 1


def test_calibrate(capsys, tiny_ini, tmp_path):
    code, out, _ = _run(capsys, "calibrate", "--config", tiny_ini, "--seed", 0, "--out", tmp_path)
    assert code == 0
    lines = (tmp_path / "calibration.csv").read_text(encoding="utf-8").splitlines()
    assert lines[0].startswith("split,seed,b_true_mean,b_pred_mean")
    assert [ln.split(",")[0] for ln in lines[1:]] == ["b=0.1", "b=0.3", "b=1", "occlusion"]
    assert out.count("seed 0:") == 4
