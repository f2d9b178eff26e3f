import json

import pytest

from craftbench.cli import RunConfig, StageError, load_config, main
from craftbench.learn import TrainConfig


def test_empty_config_gives_defaults(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("")
    assert load_config(p) == RunConfig()
    p.write_text("{}")
    assert load_config(p) == RunConfig()
    assert load_config(None).train == TrainConfig()


def test_negative_margin_rejected(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"train": {"margin": -1}}))
    with pytest.raises(StageError) as exc:
        load_config(p)
    assert exc.value.stage == "config" and "train.margin" in str(exc.value)


def test_misspelled_key_named(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"world": {"grid_sise": 20}}))
    with pytest.raises(StageError, match=r"world\.grid_sise: unknown key"):
        load_config(p)


def test_type_mismatch_and_version(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"train": {"steps": "many"}}))
    with pytest.raises(StageError, match="train.steps"):
        load_config(p)
    p.write_text(json.dumps({"format_version": 2}))
    with pytest.raises(StageError, match="format_version"):
        load_config(p)


def test_overrides_win_over_file(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"train": {"lr": 0.5, "steps": 7}}))
    cfg = load_config(p, ["train.lr=0.001", "eval.mode=argmax"])
    assert cfg.train.lr == 0.001 and cfg.train.steps == 7 and cfg.eval.mode == "argmax"


def test_main_exit_codes(tmp_path, capsys):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"train": {"bogus": 1}}))
    assert main(["train", "--config", str(p), "--out", str(tmp_path / "run")]) == 2
    assert "error [config]" in capsys.readouterr().err
    assert main(["process", "--in", str(tmp_path / "missing"), "--out", str(tmp_path / "o")]) == 1
    assert "error [process]" in capsys.readouterr().err


def test_actions_dump_matches_golden(tmp_path):
    out = tmp_path / "actions.json"
    assert main(["actions", "dump", "--out", str(out)]) == 0
    golden = (__import__("pathlib").Path(__file__).parent / "golden" / "actions.json").read_bytes()
    assert out.read_bytes() == golden


def test_process_rejects_foreign_catalog(tmp_path, capsys):
    assert main(["gen-demos", "--task", "treechop", "--episodes", "1", "--seed", "0",
                 "--out", str(tmp_path / "raw"), "--set", 'world.horizon={"treechop": 60, "iron_pickaxe": 60}']) == 0
    bad = json.loads((__import__("craftbench.actions", fromlist=["x"]).compile_action_set().to_json()))
    bad["entries"] = bad["entries"][::-1]
    (tmp_path / "bad.json").write_text(json.dumps(bad))
    assert main(["process", "--in", str(tmp_path / "raw"), "--out", str(tmp_path / "p"),
                 "--actions", str(tmp_path / "bad.json")]) == 1
    assert "error [process]" in capsys.readouterr().err


def test_pipeline_commands(tmp_path, capsys):
    horizon = 'world.horizon={"treechop": 300, "iron_pickaxe": 300}'
    assert main(["gen-demos", "--task", "iron_pickaxe", "--episodes", "3", "--seed", "4",
                 "--out", str(tmp_path / "iron_raw"), "--failure-rate", "0", "--set", horizon]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["task"] == "iron_pickaxe"
    assert (tmp_path / "iron_raw" / "run_config.json").exists()
    assert main(["gen-demos", "--task", "treechop", "--episodes", "2", "--seed", "5",
                 "--out", str(tmp_path / "tc_raw"), "--set", horizon]) == 0
    capsys.readouterr()
    main(["actions", "dump", "--out", str(tmp_path / "actions.json")])
    # short horizon: keep every trajectory regardless of success so the pipeline has data
    for raw in ("iron_raw", "tc_raw"):
        m = json.loads((tmp_path / raw / "manifest.json").read_text())
        for entry in m["trajectories"]:
            meta_p = tmp_path / raw / entry["name"] / "meta.json"
            meta = json.loads(meta_p.read_text())
            meta["success"] = True
            meta_p.write_text(json.dumps(meta))
    assert main(["process", "--in", str(tmp_path / "iron_raw"), "--out", str(tmp_path / "iron"),
                 "--actions", str(tmp_path / "actions.json"), "--fuse-treechop", str(tmp_path / "tc_raw")]) == 0
    res = json.loads(capsys.readouterr().out)
    assert res["fused_treechop"].endswith("iron_treechop_fused")
    cfg = tmp_path / "train.json"
    cfg.write_text(json.dumps({"train": {"arch": "dqn", "width_divisor": 8, "steps": 20, "batch_size": 4,
                                         "snapshot_count": 2, "log_every": 10, "test_every": 10}}))
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "run"),
                 "--data", str(tmp_path / "iron"), res["fused_treechop"]]) == 0
    capsys.readouterr()
    resolved = json.loads((tmp_path / "run" / "run_config.json").read_text())
    assert resolved["train"]["steps"] == 20 and len(resolved["train"]["datasets"]) == 2
    assert main(["eval", "--runs", str(tmp_path / "run"), "--episodes", "2", "--mode", "greedy-q",
                 "--out", str(tmp_path / "rep" / "report.json"), "--set", horizon]) == 0
    report = json.loads((tmp_path / "rep" / "report.json").read_text())
    assert report["task"] == "iron_pickaxe" and report["mode"] == "greedy_q"
    assert report["runs"][0]["run"] == "../run"
    assert main(["plot", "--in", str(tmp_path / "rep" / "report.json"), "--out", str(tmp_path / "plots")]) == 0
    assert list((tmp_path / "plots").glob("*.svg"))
