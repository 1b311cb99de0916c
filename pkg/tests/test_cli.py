import csv
import json
import subprocess
import sys
from functools import partial

import pytest

from mvc3d import cli, verify
from mvc3d.render import box_mesh, write_off

TINY = ["--image-size", "8", "--channels", "4,4,4,4,4,4,4,4", "--fc-dims", "8,8", "--init-std", "0.2",
        "--dropout", "0", "--batch-size", "4", "--lr", "1e-3"]  # fmt: skip


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    assert cli.main(["synth", "--classes", "2", "--instances", "10", "--size", "8", "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def trained(corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    argv = ["train", "--data", str(corpus), "--out", str(out), "--views", "2", "--epochs", "2", "--seed", "3", *TINY]
    assert cli.main(argv) == 0
    return out


def test_render_one_mesh(tmp_path, capsys):
    write_off(box_mesh(1, 0.5, 0.7), tmp_path / "chair_0001.off")
    out = tmp_path / "r"
    assert cli.main(["render", "--mesh", str(tmp_path / "chair_0001.off"), "--out", str(out), "--size", "8",
                     "--category", "chair"]) == 0  # fmt: skip
    assert len(list(out.rglob("*.ppm"))) == 36
    doc = json.loads((out / "manifest.json").read_text())
    assert doc["classes"] == ["chair"] and len(doc["objects"][0]["views"]) == 36
    assert (out / "chair" / "train" / "chair_0001" / "view_350_30.ppm").exists()


def test_render_mesh_dir(tmp_path):
    for cat in ("a", "b"):
        (tmp_path / "meshes" / cat).mkdir(parents=True)
        write_off(box_mesh(), tmp_path / "meshes" / cat / f"{cat}1.off")
    out = tmp_path / "r"
    argv = ["render", "--mesh-dir", str(tmp_path / "meshes"), "--out", str(out), "--size", "8", "--views", "4", "--theta-step", "90"]
    assert cli.main(argv) == 0
    assert json.loads((out / "manifest.json").read_text())["classes"] == ["a", "b"]


def test_render_missing_path_exit_2(tmp_path, capsys):
    missing = tmp_path / "nope.off"
    assert cli.main(["render", "--mesh", str(missing), "--out", str(tmp_path / "o")]) == 2
    assert str(missing) in capsys.readouterr().err


def test_render_rig_closure(tmp_path):
    write_off(box_mesh(), tmp_path / "m.off")
    assert cli.main(["render", "--mesh", str(tmp_path / "m.off"), "--out", str(tmp_path / "o"), "--theta-step", "7"]) == 2
    assert not (tmp_path / "o").exists()


def test_synth_rejects_one_class(tmp_path, capsys):
    assert cli.main(["synth", "--classes", "1", "--out", str(tmp_path)]) == 2
    assert "classes" in capsys.readouterr().err


def test_synth_same_seed_byte_identical(corpus, tmp_path):
    again = tmp_path / "again"
    assert cli.main(["synth", "--classes", "2", "--instances", "10", "--size", "8", "--out", str(again)]) == 0
    a = sorted(p.relative_to(corpus) for p in corpus.rglob("*") if p.is_file())
    assert a == sorted(p.relative_to(again) for p in again.rglob("*") if p.is_file())
    assert all((corpus / p).read_bytes() == (again / p).read_bytes() for p in a)


def test_train_outputs_and_run_config(trained):
    for name in ("run_config.json", "model.ckpt", "train_log.csv", "metrics.json"):
        assert (trained / name).exists()
    rc = json.loads((trained / "run_config.json").read_text())
    assert rc["model.n_views"] == 2 and rc["train.seed"] == 3 and rc["model.seed"] == 3
    assert rc["model.channels"] == [4] * 8


def test_train_rerun_from_run_config_is_identical(trained, tmp_path, capsys):
    capsys.readouterr()
    out = tmp_path / "again"
    assert cli.main(["train", "--config", str(trained / "run_config.json"), "--out", str(out)]) == 0
    assert (out / "model.ckpt").read_bytes() == (trained / "model.ckpt").read_bytes()


def test_config_precedence(tmp_path, corpus):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"train.max_epochs": 7, "model.n_views": 4, "data.path": str(corpus)}))
    args = cli.build_parser().parse_args(["train", "--config", str(cfg), "--views", "2"])
    rc = cli._run_config(args)
    assert rc["model.n_views"] == 2 and rc["train.max_epochs"] == 7 and rc["train.initial_lr"] == 1e-4
    cfg.write_text(json.dumps({"train.bogus": 1}))
    assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2


def test_train_schedule_and_pattern_flags(corpus):
    args = cli.build_parser().parse_args(["train", "--schedule", "decreasing", "--pattern", "independent2d",
                                          "--views", "12", "--interval", "30"])  # fmt: skip
    rc = cli._run_config(args)
    assert rc.model_config().viewpoint_schedule == (7, 5, 5, 5, 3, 3, 1, 1)
    assert rc["model.conv_pattern"] == "independent2d" and rc["data.interval"] == 30.0
    custom = cli._run_config(cli.build_parser().parse_args(["train", "--schedule", "1,3,5,7,7,5,3,1"]))
    assert custom.model_config().viewpoint_schedule == (1, 3, 5, 7, 7, 5, 3, 1)


def test_train_requires_out(corpus):
    assert cli.main(["train", "--data", str(corpus)]) == 2


def test_eval_and_retrieval(trained, corpus, tmp_path, capsys):
    capsys.readouterr()
    argv = ["eval", "--checkpoint", str(trained / "model.ckpt"), "--data", str(corpus), "--retrieval", "--out", str(tmp_path)]
    assert cli.main(argv) == 0
    metrics = json.loads((tmp_path / "eval_metrics.json").read_text())
    assert 0.0 <= metrics["accuracy"] <= 1.0
    assert 0.0 < metrics["retrieval_map"] <= 1.0
    assert "Mean" in capsys.readouterr().out


def test_eval_view_mismatch_exit_2(trained, corpus, capsys):
    argv = ["eval", "--checkpoint", str(trained / "model.ckpt"), "--data", str(corpus), "--views", "6"]
    assert cli.main(argv) == 2
    err = capsys.readouterr().err
    assert "N=2" in err and "N=6" in err


def test_eval_missing_checkpoint_exit_2(corpus, tmp_path):
    assert cli.main(["eval", "--checkpoint", str(tmp_path / "x.ckpt"), "--data", str(corpus)]) == 2


def test_sweep_views_csv(corpus, tmp_path, capsys):
    out = tmp_path / "sweep"
    argv = ["sweep-views", "--data", str(corpus), "--out", str(out), "--views-list", "1,2",
            "--repeats", "2", "--epochs", "1", *TINY]  # fmt: skip
    assert cli.main(argv) == 0
    rows = list(csv.reader(open(out / "sweep.csv")))
    assert tuple(rows[0]) == cli.SWEEP_COLUMNS
    assert [r[0] for r in rows[1:]] == ["1", "2"] and all(r[4] == "2" for r in rows[1:])
    assert (out / "N2_r1" / "model.ckpt").exists() and (out / "run_config.json").exists()


def test_verify_passes_and_reports_timing(capsys):
    assert cli.main(["verify"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[-1] == f"{len(verify.CHECKS)}/{len(verify.CHECKS)} checks passed"
    assert all(line.startswith("PASS") and " ms " in line for line in lines[:-1])


def test_verify_catches_ceil_pool_mutation():
    results = verify.run_checks({"layer-table": partial(verify.check_layer_table, pool_view_rounding="ceil")})
    bad = next(r for r in results if r.name == "layer-table")
    assert not bad.passed and "Pool4" in bad.detail


def test_console_script_usage_error():
    proc = subprocess.run([sys.executable, "-m", "mvc3d.cli", "eval"], capture_output=True, text=True)
    assert proc.returncode == 2 and "--checkpoint" in proc.stderr
