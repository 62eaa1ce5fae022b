import csv
import json

import pytest
import yaml

from divlab import pipeline
from divlab.cli import main
from divlab.learners import Checkpoint, new_checkpoint, train

pytestmark = pytest.mark.filterwarnings("ignore::RuntimeWarning")


def run(*argv):
    return main([str(a) for a in argv])


def outputs(out):
    names = ["diversity.csv", "evaluation.csv", "report_points.csv", "report_summary.csv",
             "report.json"]
    return {n: (out / n).read_bytes() for n in names}


def test_run_all_builds_tree_and_is_idempotent(tiny_config, tmp_path, caplog):
    out = tmp_path / "out"
    assert run("run-all", "--config", tiny_config, "--out-dir", out) == 0
    ckpts = sorted(p.name for p in (out / "checkpoints").iterdir())
    assert len(ckpts) == 3 * 3  # learners x training datasets
    assert (out / "probe" / "probe.dvpv").exists()
    manifest = json.loads((out / "data" / "manifest.json").read_text())
    ids = [d["dataset_id"] for d in manifest["datasets"]]
    assert sorted(ids) == sorted(set(ids)) == ["control-0", "spread-0.5", "spread-2", "union-1+1"]

    with open(out / "diversity.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 4
    summary = list(csv.DictReader(open(out / "report_summary.csv")))
    assert [r["learner_label"] for r in summary] == ["PT", "FO MAML 1", "HO MAML 1"]
    top = json.loads((out / "manifest.json").read_text())
    for name in ("diversity.csv", "evaluation.csv", "report_points.csv", "report_summary.csv"):
        header = (out / name).read_text().splitlines()
        assert header[0].endswith("config_hash,seed")
        assert header[1].endswith(f"{top['config_hash']},0")
    report = json.loads((out / "report.json").read_text())
    assert report["meta"]["config_hash"] == top["config_hash"]
    assert report["meta"]["uncontrolled"] is False

    mtimes = {p: p.stat().st_mtime_ns for p in (out / "checkpoints").iterdir()}
    before = outputs(out)
    caplog.clear()
    assert run("run-all", "--config", tiny_config, "--out-dir", out) == 0
    assert {p: p.stat().st_mtime_ns for p in (out / "checkpoints").iterdir()} == mtimes
    assert outputs(out) == before
    assert "train: up to date" in caplog.text


def test_same_seed_same_bytes_and_workers_do_not_matter(tiny_config, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("run-all", "--config", tiny_config, "--out-dir", a) == 0
    assert run("run-all", "--config", tiny_config, "--out-dir", b, "--workers", 2) == 0
    assert outputs(a) == outputs(b)
    c = tmp_path / "c"
    assert run("run-all", "--config", tiny_config, "--out-dir", c, "--seed", 1) == 0
    assert outputs(c)["diversity.csv"] != outputs(a)["diversity.csv"]


def test_interrupted_training_resumes_bit_identically(tiny_config, tmp_path):
    from divlab.cli import build_parser, resolve_config

    full, part = tmp_path / "full", tmp_path / "part"
    assert run("run-all", "--config", tiny_config, "--out-dir", full) == 0
    assert run("gen-data", "--config", tiny_config, "--out-dir", part) == 0
    cfg = resolve_config(build_parser().parse_args(
        ["train", "--config", str(tiny_config), "--out-dir", str(part)]))
    layout = pipeline.Layout.of(cfg)
    layout.checkpoints.mkdir()
    # a run killed after 3 of 6 steps
    data = pipeline.open_dataset(cfg, layout, "spread-2", "train")
    lcfg = pipeline.learner_config(cfg, "HO MAML 1", "spread-2")
    extra = {"config_hash": "x", "seed": 0, "data_key": pipeline.data_key(cfg),
             "uncontrolled": False, "target_steps": 6}
    train(new_checkpoint(data, lcfg, extra), data, 3).save(layout.checkpoint("HO MAML 1", "spread-2"))
    assert run("train", "--config", tiny_config, "--out-dir", part) == 0
    name = "HO-MAML-1__spread-2.dvck"
    resumed = Checkpoint.load(part / "checkpoints" / name)
    straight = Checkpoint.load(full / "checkpoints" / name)
    assert resumed.outer_step == 6
    assert resumed.model.backbone.values.tobytes() == straight.model.backbone.values.tobytes()
    assert resumed.model.head.values.tobytes() == straight.model.head.values.tobytes()


def test_resume_under_other_config_is_refused(tiny_config, tmp_path, capsys):
    out = tmp_path / "o"
    assert run("gen-data", "--config", tiny_config, "--out-dir", out) == 0
    assert run("train", "--config", tiny_config, "--out-dir", out) == 0
    code = run("train", "--config", tiny_config, "--out-dir", out, "--set", "learners.inner_lr=0.2")
    assert code == 2
    assert "inner_lr: 0.1 -> 0.2" in capsys.readouterr().err
    assert run("train", "--config", tiny_config, "--out-dir", out, "--set",
               "learners.inner_lr=0.2", "--force") == 0


def test_gen_data_collision_needs_force(tiny_config, tmp_path):
    out = tmp_path / "o"
    assert run("gen-data", "--config", tiny_config, "--out-dir", out) == 0
    first = (out / "data" / "spread-2.train.dvds").read_bytes()
    assert run("gen-data", "--config", tiny_config, "--out-dir", out) == 0  # same config
    assert (out / "data" / "spread-2.train.dvds").read_bytes() == first
    assert run("gen-data", "--config", tiny_config, "--out-dir", out, "--seed", 4) == 2
    assert run("gen-data", "--config", tiny_config, "--out-dir", out, "--seed", 4, "--force") == 0
    assert (out / "data" / "spread-2.train.dvds").read_bytes() != first


def test_missing_inputs_exit_3(tiny_config, tmp_path, capsys):
    out = tmp_path / "o"
    assert run("correlate", "--config", tiny_config, "--out-dir", out) == 3
    assert "diversity.csv" in capsys.readouterr().err
    assert run("diversity", "--config", tiny_config, "--out-dir", out) == 3
    assert not (out / "report_summary.csv").exists()


def test_diversity_can_pretrain_probe(tiny_config, tmp_path):
    out = tmp_path / "o"
    assert run("gen-data", "--config", tiny_config, "--out-dir", out) == 0
    assert run("diversity", "--config", tiny_config, "--out-dir", out, "--pretrain-probe",
               "--label-mode", "empirical") == 0
    rows = list(csv.DictReader(open(out / "diversity.csv")))
    assert {r["label_mode"] for r in rows} == {"empirical"}


def test_bad_config_exit_2(tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text(yaml.safe_dump({"learners": {"grid": []}}))
    assert run("gen-data", "--config", p, "--out-dir", tmp_path) == 2
    assert run("gen-data", "--config", tmp_path / "absent.yaml") == 2


def test_divergence_exit_4(tiny_config, tmp_path):
    out = tmp_path / "o"
    assert run("gen-data", "--config", tiny_config, "--out-dir", out) == 0
    assert run("train", "--config", tiny_config, "--out-dir", out,
               "--set", "learners.inner_lr=1e300", "--set", "learners.grid=[FO MAML 1]") == 4


def test_out_dir_precedence(tiny_config, tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("DIVLAB_OUT", str(tmp_path / "env"))
    assert run("show-config", "--config", tiny_config) == 0
    assert f"output_dir: {tmp_path / 'env'}" in capsys.readouterr().out
    assert run("show-config", "--config", tiny_config, "--out-dir", tmp_path / "flag") == 0
    assert f"output_dir: {tmp_path / 'flag'}" in capsys.readouterr().out


def test_uncontrolled_scales_steps(tiny_config, tmp_path):
    out = tmp_path / "o"
    assert run("gen-data", "--config", tiny_config, "--out-dir", out) == 0
    assert run("train", "--config", tiny_config, "--out-dir", out, "--uncontrolled") == 0
    union = Checkpoint.load(out / "checkpoints" / "PT__union-1+1.dvck")
    single = Checkpoint.load(out / "checkpoints" / "PT__spread-2.dvck")
    assert (single.outer_step, union.outer_step) == (6, 12)
    assert union.extra["uncontrolled"] is True
