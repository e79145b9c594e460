import json
import shutil

import pytest
import yaml

from mindshot import io, pipeline
from mindshot.cli import main
from mindshot.config import config_to_dict

from conftest import tiny_config


@pytest.fixture
def cfg_file(tmp_path):
    cfg = tiny_config()
    d = config_to_dict(cfg)
    d["output_dir"] = str(tmp_path / "out")
    p = tmp_path / "cfg.yaml"
    p.write_text(yaml.safe_dump(d))
    return p


def run(*args):
    return main([str(a) for a in args])


def test_gen_data_ok(cfg_file, tmp_path, capsys):
    assert run("gen-data", "-c", cfg_file) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["counts"]["samples"] == 3 * 4 * 6
    assert (tmp_path / "out" / "data" / "run_manifest.json").exists()


def test_gen_data_twice_same_checksum(cfg_file, tmp_path, capsys):
    run("gen-data", "-c", cfg_file)
    a = json.loads(capsys.readouterr().out)["dataset_checksum"]
    run("gen-data", "-c", cfg_file, "-o", tmp_path / "other")
    b = json.loads(capsys.readouterr().out)["dataset_checksum"]
    assert a == b


def test_invalid_key_exit_2(tmp_path, capsys):
    p = tmp_path / "bad.yaml"
    p.write_text("data:\n  n_clases: 3\n")
    assert run("gen-data", "-c", p) == 2
    assert "data.n_clases" in capsys.readouterr().err


def test_missing_config_file_exit_2(tmp_path):
    assert run("gen-data", "-c", tmp_path / "nope.yaml") == 2


def test_missing_upstream_exit_3(cfg_file, capsys):
    assert run("pretrain", "-c", cfg_file) == 3
    assert "gen-data" in capsys.readouterr().err
    run("gen-data", "-c", cfg_file)
    assert run("adapt", "-c", cfg_file) == 3
    assert "pretrain" in capsys.readouterr().err


def test_checksum_mismatch_needs_force(cfg_file, tmp_path, capsys):
    run("gen-data", "-c", cfg_file)
    target = tmp_path / "out" / "data" / "tuning.msarr"
    blob = bytearray(target.read_bytes())
    blob[-1] ^= 1
    target.write_bytes(bytes(blob))
    assert run("pretrain", "-c", cfg_file) == 3
    assert "checksum mismatch" in capsys.readouterr().err
    assert run("pretrain", "-c", cfg_file, "--force") == 0


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numeric_failure_exit_4(cfg_file, tmp_path):
    d = yaml.safe_load(cfg_file.read_text())
    d["pretrain"]["max_lr"] = 1e300
    cfg_file.write_text(yaml.safe_dump(d))
    run("gen-data", "-c", cfg_file)
    assert run("pretrain", "-c", cfg_file) == 4


def test_stage_chain_and_verify(cfg_file, tmp_path, capsys):
    out = tmp_path / "out"
    assert run("gen-data", "-c", cfg_file) == 0
    assert run("pretrain", "-c", cfg_file) == 0
    for s in ("kda_max", "kda_min", "random"):
        assert run("select", "-c", cfg_file, "--strategy", s) == 0
    sel = io.read_json(out / "select" / "kda_min" / "selection.json")
    assert len(sel["classes"]) == 4 and {"mean", "std", "coordinates"} <= set(sel["classes"][0])
    for sup in ("none", "mse", "amp", "fourier"):
        assert run("adapt", "-c", cfg_file, "--supervision", sup) == 0
        assert run("eval", "-c", cfg_file, "--supervision", sup) == 0
    assert run("adapt", "-c", cfg_file, "--strategy", "kda_max") == 0
    assert run("eval", "-c", cfg_file, "--strategy", "kda_max") == 0
    capsys.readouterr()
    assert run("report", "-c", cfg_file) == 0
    table4 = (out / "report" / "tables" / "table4_supervision.csv").read_text().splitlines()
    assert [r.split(",")[0] for r in table4[1:]] == ["none", "mse", "amp", "fourier"]
    table3 = (out / "report" / "tables" / "table3_selection.csv").read_text().splitlines()
    assert len(table3) == 2
    m = io.read_json(out / "adapt" / "fourier_k1_first_d1" / "run_manifest.json")
    assert "data/run_manifest.json" in m["inputs"] and "pretrain/run_manifest.json" in m["inputs"]
    assert "wall_seconds" not in json.dumps(m)
    assert run("verify", "-c", cfg_file) == 0
    (out / "stray.bin").write_bytes(b"x")
    assert run("verify", "-c", cfg_file) == 3
    assert "dangling: stray.bin" in capsys.readouterr().out


def test_report_roundtrip_from_predictions(cfg_file, tmp_path):
    for stage in ("gen-data", "pretrain", "adapt", "eval"):
        assert run(stage, "-c", cfg_file) == 0
    out = tmp_path / "out"
    edir = out / "eval" / "fourier_k1_first_d1"
    again = pipeline.report_from_predictions(out, edir)
    assert io.read_json(edir / "eval_report.json")["report"] == json.loads(
        json.dumps(again.as_dict()))
    run("report", "-c", cfg_file)
    first = (out / "report" / "tables" / "all_runs.csv").read_bytes()
    shutil.rmtree(out / "report")
    run("report", "-c", cfg_file)
    assert (out / "report" / "tables" / "all_runs.csv").read_bytes() == first


def test_ablate_supervision_rows_and_idempotence(cfg_file, tmp_path, capsys):
    run("gen-data", "-c", cfg_file)
    run("pretrain", "-c", cfg_file)
    capsys.readouterr()
    assert run("ablate", "-c", cfg_file, "--axis", "supervision") == 0
    first = capsys.readouterr().out
    assert len(first.strip().splitlines()) == 5
    table = (tmp_path / "out" / "sweeps" / "supervision" / "table.csv").read_bytes()
    assert run("ablate", "-c", cfg_file, "--axis", "supervision") == 0
    second = capsys.readouterr().out
    assert second.count("skipped (complete)") == 4
    assert (tmp_path / "out" / "sweeps" / "supervision" / "table.csv").read_bytes() == table


def test_threads_env(cfg_file, monkeypatch):
    monkeypatch.setenv("MINDSHOT_THREADS", "1")
    assert run("gen-data", "-c", cfg_file) == 0
    monkeypatch.setenv("MINDSHOT_THREADS", "zero")
    assert run("gen-data", "-c", cfg_file) == 2
