import json
import pathlib

import numpy as np
import pytest
from click.testing import CliRunner

from nocalign.cli import main
from nocalign.synth import make_mesh
from nocalign.tensorio import save_mesh


def run(*args):
    return CliRunner().invoke(main, [str(a) for a in args],
                              catch_exceptions=False)


def run_failing(*args):
    return CliRunner().invoke(main, [str(a) for a in args])


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """One full workflow: synth-gen through eval at smoke scale."""
    work = tmp_path_factory.mktemp("cli")
    (work / "spec.json").write_text(json.dumps(
        {"count": 2, "kinds": ["cube"], "image_size": 112, "patch": 14,
         "channels": 16}))
    save_mesh(work / "cube.obj", make_mesh("cube"))
    for args in (
        ["synth-gen", "--spec", work / "spec.json", "--out", work / "data",
         "--seed", 50],
        ["render-templates", "--mesh", work / "cube.obj", "--out",
         work / "tpl", "--views", 12, "--size", 112],
        ["train-adapter", "--data", work / "data", "--out", work / "ckpt",
         "--steps", 20, "--batch", 32, "--hidden", 32, "--enc-channels", 8,
         "--beta", 0],
        ["build-grid", "--mesh", work / "cube.obj", "--templates",
         work / "tpl", "--adapter", work / "ckpt", "--out", work / "grid"],
        ["align", "--data", work / "data", "--grid", work / "grid",
         "--adapter", work / "ckpt", "--out", work / "results",
         "--steps", 8],
        ["eval", "--results", work / "results", "--gt", work / "data",
         "--out", work / "report"],
    ):
        result = run(*args)
        assert result.exit_code == 0, f"{args[0]}: {result.output}"
    return work


def test_workflow_products(workdir):
    assert (workdir / "data" / "cube-000050" / "samples.jsonl").is_file()
    assert (workdir / "tpl" / "view_011" / "noc.nten").is_file()
    assert (workdir / "ckpt" / "loss.csv").read_text().startswith(
        "step,total,noc,triplet")
    assert (workdir / "grid" / "manifest.json").is_file()
    docs = sorted((workdir / "results").glob("cube-*.json"))
    assert len(docs) == 2
    report = workdir / "report"
    assert (report / "metrics.csv").read_text().splitlines()[0] == \
        "category,n,acc_single,acc_nms,t_err_mean,r_err_mean,s_err_mean"
    assert sorted(p.name for p in (report / "traces").glob("*.svg")) == [
        "cube-000050.svg", "cube-000051.svg"]
    assert (report / "overlays" / "cube-000050.png").is_file()


def test_manifests_echo_defaults(workdir):
    man = json.loads((workdir / "results" / "manifest.json").read_text())
    assert man["command"] == "align"
    assert man["params"]["steps"] == 8
    assert man["params"]["ransac_threshold"] == 0.25
    assert man["params"]["sample"] == "all"
    # checkpoint manifests keep their own keys under the provenance
    ck = json.loads((workdir / "ckpt" / "manifest.json").read_text())
    assert ck["command"] == "train-adapter"
    assert ck["kind"] == "adapter"
    assert ck["params"]["seed"] == 0


def test_no_refine_matches_coarse_of_full_run(workdir):
    out = workdir / "results_norefine"
    result = run("align", "--data", workdir / "data", "--grid",
                 workdir / "grid", "--adapter", workdir / "ckpt",
                 "--out", out, "--no-refine")
    assert result.exit_code == 0
    for path in sorted(out.glob("cube-*.json")):
        bare = json.loads(path.read_text())
        full = json.loads((workdir / "results" / path.name).read_text())
        assert bare["refined"] == full["coarse"]
        assert bare["coarse"] == full["coarse"]


def test_align_is_deterministic_modulo_timings(workdir):
    out = workdir / "results_again"
    result = run("align", "--data", workdir / "data", "--grid",
                 workdir / "grid", "--adapter", workdir / "ckpt",
                 "--out", out, "--steps", 8)
    assert result.exit_code == 0
    for path in sorted(out.glob("cube-*.json")):
        a = json.loads(path.read_text())
        b = json.loads((workdir / "results" / path.name).read_text())
        a.pop("timings_ms"), b.pop("timings_ms")
        assert a == b


def test_eval_nms_equals_single_on_single_frame_groups(workdir):
    accs = {}
    for metric in ("single", "nms"):
        out = workdir / f"report_{metric}"
        result = run("eval", "--results", workdir / "results", "--gt",
                     workdir / "data", "--metric", metric, "--out", out,
                     "--no-figures")
        assert result.exit_code == 0
        man = json.loads((out / "manifest.json").read_text())
        accs[metric] = (man["category_avg"], man["instance_avg"])
    assert accs["single"] == accs["nms"]


def test_single_sample_selection(workdir):
    out = workdir / "results_one"
    result = run("align", "--data", workdir / "data", "--grid",
                 workdir / "grid", "--adapter", workdir / "ckpt",
                 "--out", out, "--sample", "cube-000051", "--no-refine")
    assert result.exit_code == 0
    assert [p.name for p in sorted(out.glob("cube-*.json"))] == [
        "cube-000051.json"]


def test_unknown_flag_names_the_flag():
    result = run_failing("synth-gen", "--nope", "x")
    assert result.exit_code != 0
    assert "--nope" in result.output


def test_missing_file_names_the_path(tmp_path):
    result = run_failing("synth-gen", "--spec", tmp_path / "absent.json",
                         "--out", tmp_path / "out")
    assert result.exit_code != 0
    assert "absent.json" in result.output


def test_config_file_supplies_defaults_but_flags_win(workdir, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"seed": 7}))
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps(
        {"count": 1, "kinds": ["cube"], "image_size": 112, "patch": 14,
         "channels": 8}))
    run_a = run("synth-gen", "--spec", spec, "--out", tmp_path / "a",
                "--config", cfg)
    assert run_a.exit_code == 0
    man = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert man["params"]["seed"] == 7
    run_b = run("synth-gen", "--spec", spec, "--out", tmp_path / "b",
                "--config", cfg, "--seed", 3)
    assert run_b.exit_code == 0
    man = json.loads((tmp_path / "b" / "manifest.json").read_text())
    assert man["params"]["seed"] == 3
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"not_a_flag": 1}))
    result = run_failing("synth-gen", "--spec", spec,
                         "--out", tmp_path / "c", "--config", bad)
    assert result.exit_code != 0
    assert "not_a_flag" in result.output


def test_failed_command_removes_partial_output(workdir, tmp_path):
    # default mining thresholds are unsatisfiable on a two-scene pool
    out = tmp_path / "ckpt_fail"
    result = run_failing("train-adapter", "--data", workdir / "data",
                         "--out", out, "--steps", 20)
    assert result.exit_code != 0
    assert not out.exists()


def test_jobs_env_fallback(workdir, tmp_path, monkeypatch):
    monkeypatch.setenv("NOCALIGN_JOBS", "1")
    out = tmp_path / "results_env"
    result = run("align", "--data", workdir / "data", "--grid",
                 workdir / "grid", "--adapter", workdir / "ckpt",
                 "--out", out, "--no-refine")
    assert result.exit_code == 0
    man = json.loads((out / "manifest.json").read_text())
    assert man["params"]["jobs"] == 1
