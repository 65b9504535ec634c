"""CLI surfaces: commands, file outputs, exit codes, config overrides."""

import json
import os

import numpy as np
import pytest

from labeldistill.cli import main
from labeldistill.data import load_annotations
from labeldistill.serialize import load_tensors

FAST = ["--detector.channels", "16", "--gen.image_size", "32",
        "--trainer.batch_size", "4", "--trainer.attn_heads", "4",
        "--trainer.total_iters", "9"]


def run_cli(*argv):
    return main(list(argv))


def test_gen_deterministic(tmp_path):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    assert run_cli("gen", "--out", str(a), "--seed", "7", "--count", "30") == 0
    assert run_cli("gen", "--out", str(b), "--seed", "7", "--count", "30") == 0
    assert a.read_bytes() == b.read_bytes()
    assert (tmp_path / "a.jsonl.config_resolved.json").exists()


def test_gen_zero_count_valid(tmp_path):
    out = tmp_path / "empty.jsonl"
    assert run_cli("gen", "--out", str(out), "--seed", "1", "--count", "0") == 0
    assert load_annotations(out) == []


def test_gen_round_trip_count(tmp_path):
    out = tmp_path / "d.jsonl"
    assert run_cli("gen", "--out", str(out), "--seed", "3", "--count", "40") == 0
    assert len(load_annotations(out)) == 40


def test_gen_refuses_overwrite(tmp_path, capsys):
    out = tmp_path / "d.jsonl"
    assert run_cli("gen", "--out", str(out), "--seed", "3", "--count", "2") == 0
    assert run_cli("gen", "--out", str(out), "--seed", "3", "--count", "2") == 1
    assert run_cli("gen", "--out", str(out), "--seed", "3", "--count", "2",
                   "--force") == 0


@pytest.fixture(scope="module")
def cli_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "train.jsonl"
    assert main(["gen", "--out", str(data), "--seed", "5", "--count", "8",
                 "--gen.image_size", "32"]) == 0
    out = root / "run_lgd"
    assert main(["train", "--data", str(data), "--out", str(out), *FAST]) == 0
    return root, data, out


def test_train_outputs(cli_run):
    root, data, out = cli_run
    for name in ("config_resolved.json", "metrics.jsonl", "ckpt_9.bin",
                 "student_only_final.bin", "loss_curves.png"):
        assert (out / name).exists(), name
    cfg = json.loads((out / "config_resolved.json").read_text())
    assert cfg["trainer"]["total_iters"] == 9
    assert cfg["mode"] == "lgd"
    lines = (out / "metrics.jsonl").read_text().strip().splitlines()
    assert len(lines) == 9


def test_train_baseline_mode(cli_run, tmp_path):
    root, data, _ = cli_run
    out = tmp_path / "run_base"
    assert main(["train", "--data", str(data), "--out", str(out), *FAST,
                 "--mode", "baseline"]) == 0
    ck = load_tensors(out / "ckpt_9.bin")
    assert not any(n.startswith("lgd.") for n in ck)
    rep = json.loads((out / "metrics.jsonl").read_text().splitlines()[0])
    assert rep["l_det_i"] == 0.0 and rep["l_distill"] == 0.0


def test_eval_runs_on_student_only_export(cli_run, tmp_path):
    root, data, run = cli_run
    out = tmp_path / "eval"
    code = main(["eval", "--ckpt", str(run / "student_only_final.bin"),
                 "--data", str(data), "--out", str(out),
                 "--detector.channels", "16", "--gen.image_size", "32"])
    assert code == 0
    result = json.loads((out / "eval.json").read_text())
    assert set(result) >= {"ap50", "ap", "per_class_ap50", "per_class_ap"}
    assert (out / "eval_per_class.csv").exists()
    assert (out / "pr_curve_iou50.png").exists()


def test_inspect_dump_and_row_stochastic_weights(cli_run, tmp_path):
    root, data, run = cli_run
    out = tmp_path / "inspect"
    refs = load_annotations(data)
    code = main(["inspect", "--ckpt", str(run / "ckpt_9.bin"), "--data", str(data),
                 "--scene-id", refs[0].id, "--out", str(out)])
    assert code == 0
    dump = load_tensors(out / f"inspect_{refs[0].id}.bin")
    n_obj = len(refs[0].annotations)
    for lvl in (1, 2):
        assert f"student.x.p{lvl}" in dump
        assert f"instructive.p{lvl}" in dump
        assert f"residual_in.p{lvl}" in dump
        w = dump[f"attention.p{lvl}"]
        assert w.shape == (4, n_obj + 1, n_obj + 1)
        assert np.all(np.abs(w.sum(axis=-1) - 1.0) < 1e-6)
        masks = dump[f"masks.p{lvl}"]
        assert masks.shape[0] == n_obj + 1
    assert (out / f"inspect_{refs[0].id}_maps.png").exists()
    assert (out / f"inspect_{refs[0].id}_attention.png").exists()


def test_inspect_unknown_scene_is_usage_error(cli_run, tmp_path):
    root, data, run = cli_run
    code = main(["inspect", "--ckpt", str(run / "ckpt_9.bin"), "--data", str(data),
                 "--scene-id", "nope", "--out", str(tmp_path / "x")])
    assert code == 1


def test_compare_outputs(cli_run, tmp_path):
    root, data, run = cli_run
    ck = str(run / "student_only_final.bin")
    out = tmp_path / "cmp"
    code = main(["compare", "--baseline", f"{ck},{ck}", "--lgd", f"{ck},{ck}",
                 "--data", str(data), "--seeds", "0,1", "--out", str(out),
                 "--detector.channels", "16", "--gen.image_size", "32"])
    assert code == 0
    rows = [json.loads(l) for l in (out / "comparison.jsonl").read_text().splitlines()]
    assert len(rows) == 2
    for row in rows:
        assert set(row) == {"seed", "baseline", "lgd", "delta"}
        assert row["delta"]["ap50"] == 0.0
    assert (out / "comparison.csv").exists()
    assert (out / "comparison.png").exists()
    assert (out / "comparison_summary.json").exists()


def test_usage_errors_exit_one(tmp_path):
    assert main(["gen", "--count", "3"]) == 1          # missing --out
    assert main(["bogus-command"]) == 1
    assert main(["gen", "--out", str(tmp_path / "x.jsonl"), "--count", "1",
                 "--gen.not_a_field", "3"]) == 1       # unknown config key
    assert main(["gen", "--out", str(tmp_path / "y.jsonl"), "--count", "1",
                 "--mode"]) == 1                       # dangling override


def test_runtime_errors_exit_two(tmp_path):
    assert main(["eval", "--ckpt", str(tmp_path / "missing.bin"),
                 "--data", str(tmp_path / "missing.jsonl"),
                 "--out", str(tmp_path / "o")]) == 2


def test_output_root_env_redirects_relative_paths(tmp_path, monkeypatch):
    monkeypatch.setenv("LABELDISTILL_OUT_ROOT", str(tmp_path))
    monkeypatch.chdir(tmp_path)
    assert main(["gen", "--out", "sub/data.jsonl", "--seed", "2", "--count", "2"]) == 0
    assert (tmp_path / "sub" / "data.jsonl").exists()
