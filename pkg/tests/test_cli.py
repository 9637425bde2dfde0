import json
from pathlib import Path

import pytest

from parallax.cli import main
from parallax.report import read_metrics

SMOKE = str(Path(__file__).resolve().parent.parent / "configs" / "smoke.toml")


def _last_json(capsys):
    return json.loads(capsys.readouterr().out.strip().splitlines()[-1])


def test_count_params(capsys):
    assert main(["count-params", "--recipe", "Ti/16", "--variant", "parallel_raw"]) == 0
    doc = _last_json(capsys)
    assert doc["params"] == 5_710_312 and abs(doc["relative_error"]) < 0.02


def test_gen_data_and_fid(tmp_path, capsys):
    assert main(["gen-data", "--kind", "toy-domains", "--n", "16", "--seed", "0", "--out", str(tmp_path)]) == 0
    assert len(list((tmp_path / "A").glob("*.ppm"))) == 16
    assert main(["fid", "--real", str(tmp_path / "A"), "--fake", str(tmp_path / "A")]) == 0
    same = _last_json(capsys)
    assert same["domain"] == "A" and same["fid"] == pytest.approx(0.0, abs=1e-6)
    main(["fid", "--real", str(tmp_path / "A"), "--fake", str(tmp_path / "B")])
    assert _last_json(capsys)["fid"] > 0.0
    assert main(["gen-data", "--kind", "provocation", "--n", "64", "--out", str(tmp_path / "p")]) == 0
    assert (tmp_path / "p" / "provocation.bin").stat().st_size == 64 * 3073


def test_train_cls_and_resume(tmp_path, capsys):
    full, part = tmp_path / "full", tmp_path / "part"
    assert main(["train-cls", "--config", SMOKE, "--out", str(full)]) == 0
    summary = _last_json(capsys)
    assert summary["epochs"] == 2 and 0.0 <= summary["initial_test_accuracy"] <= 1.0
    assert (full / "training.png").stat().st_size > 0
    main(["train-cls", "--config", SMOKE, "--out", str(part), "--until-epoch", "1"])
    main(["train-cls", "--config", SMOKE, "--out", str(part), "--resume", str(part / "checkpoint.vtub")])
    assert (part / "metrics.jsonl").read_bytes() == (full / "metrics.jsonl").read_bytes()
    assert (part / "checkpoint.vtub").read_bytes() == (full / "checkpoint.vtub").read_bytes()
    header = read_metrics(full / "metrics.jsonl")[0]
    assert header["header"] == "train-cls" and header["config"]["model"]["layers"] == 6


def test_probe_stability_writes_verdict(tmp_path, capsys):
    out = tmp_path / "probe"
    code = main(["probe-stability", "--config", SMOKE, "--seeds", "1", "--max-steps", "3", "--out", str(out)])
    verdict = json.loads((out / "verdict.json").read_text())
    assert code == (0 if verdict["passed"] else 1)
    assert (out / "raw_seed0.jsonl").exists() and (out / "stability.png").exists()


def test_train_gan(tmp_path, capsys):
    out = tmp_path / "gan"
    assert main(["train-gan", "--config", SMOKE, "--out", str(out)]) == 0
    summary = _last_json(capsys)
    assert summary["steps"] == 4
    for name in ("gan.png", "samples.png", "generators.vtub", "metrics.jsonl"):
        assert (out / name).exists()
    assert list((out / "samples").glob("*.ppm"))
    evals = [r for r in read_metrics(out / "metrics.jsonl") if "fid_b" in r]
    assert [r["step"] for r in evals] == [0, 2, 4]


def test_errors_exit_nonzero(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("[train]\nlr = -1.0\n")
    assert main(["train-cls", "--config", str(bad), "--out", str(tmp_path / "x")]) == 1
    assert "line 2" in capsys.readouterr().err
    assert main(["fid", "--real", str(tmp_path / "none"), "--fake", str(tmp_path)]) == 1
