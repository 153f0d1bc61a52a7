import csv
import json

import pytest

from niva.cli import EXIT_CHECK, EXIT_INPUT, EXIT_OK, EXIT_USAGE, main

TINY_SETS = ["model.model_dim=16", "model.style_dim=4", "model.num_intentions=3", "model.num_heads=2",
             "model.fourier_features=8", "model.map_points=8", "model.embed_dim=4",
             "model.num_map_neighbors=8", "model.num_agent_neighbors=2", "model.history_window=6",
             "train.epochs=1", "train.batch_size=2", "train.warmup_steps=1", "train.dropout=0.0"]


def _sets(items):
    return [arg for item in items for arg in ("--set", item)]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data.jsonl"
    assert main(["-q", "gen", "--kind", "intersection-3exit", "--n", "2", "--seed", "1", "--out", str(data)]) == 0
    ckpt = root / "model.nivack"
    assert main(["-q", "train", "--data", str(data), "--out", str(ckpt), *_sets(TINY_SETS)]) == 0
    return root, data, ckpt


def test_gen_is_reproducible(tmp_path, workspace):
    _, data, _ = workspace
    again = tmp_path / "again.jsonl"
    assert main(["-q", "gen", "--kind", "intersection-3exit", "--n", "2", "--seed", "1", "--out", str(again)]) == 0
    assert again.read_bytes() == data.read_bytes()


def test_train_is_reproducible_and_writes_sidecars(tmp_path, workspace):
    _, data, ckpt = workspace
    other = tmp_path / "other.nivack"
    assert main(["-q", "train", "--data", str(data), "--out", str(other), *_sets(TINY_SETS)]) == 0
    assert other.read_bytes() == ckpt.read_bytes()
    resolved = json.loads(open(str(ckpt) + ".resolved.json").read())
    assert resolved["model"]["model_dim"] == 16 and resolved["train"]["epochs"] == 1
    trace = list(csv.reader(open(str(ckpt) + ".trace.csv")))
    assert trace[0] == ["step", "lr", "loss", "kl_z", "kl_b", "nll"] and len(trace) == 2


def test_resolved_config_is_logged(workspace, caplog):
    root, data, _ = workspace
    with caplog.at_level("INFO", logger="niva"):
        main(["gen", "--kind", "merge", "--n", "1", "--out", str(root / "m.jsonl")])
    assert any("resolved gen config" in r.getMessage() for r in caplog.records)


def test_usage_and_input_errors(tmp_path, workspace):
    _, data, ckpt = workspace
    out = str(tmp_path / "x.nivack")
    assert main(["-q", "train", "--data", str(data), "--out", out, "--set", "train.bogus=1"]) == EXIT_USAGE
    assert main(["-q", "train", "--data", str(data), "--out", out, "--set", "model.model_dim=abc"]) == EXIT_USAGE
    assert main(["-q", "train", "--data", str(tmp_path / "missing.jsonl"), "--out", out]) == EXIT_INPUT
    assert main(["-q", "gen", "--kind", "merge", "--n", "0", "--out", out]) == EXIT_USAGE
    bad = tmp_path / "bad.nivack"
    bad.write_bytes(b"NIVA" + ckpt.read_bytes()[4:-1])
    assert main(["-q", "sample", "--ckpt", str(bad), "--data", str(data), "--rollouts", "1",
                 "--out", str(tmp_path / "r.jsonl")]) == EXIT_INPUT
    assert main(["-q", "sample", "--ckpt", str(ckpt), "--data", str(data), "--rollouts", "1",
                 "--intention", "9", "--out", str(tmp_path / "r.jsonl")]) == EXIT_USAGE
    with pytest.raises(SystemExit):
        main(["bound", "--k", "1"])


def test_sample_eval_plot_pipeline(tmp_path, workspace):
    _, data, ckpt = workspace
    rollouts = tmp_path / "r.jsonl"
    args = ["-q", "sample", "--ckpt", str(ckpt), "--data", str(data), "--rollouts", "2",
            "--set", "rollout.horizon=5", "--intention", "1", "--out"]
    assert main(args + [str(rollouts)]) == EXIT_OK
    again = tmp_path / "r2.jsonl"
    assert main(args + [str(again)]) == EXIT_OK
    assert again.read_bytes() == rollouts.read_bytes()

    # a short horizon cannot be scored against the 60-step truth
    report = tmp_path / "m.csv"
    assert main(["-q", "eval", "--rollouts", str(rollouts), "--truth", str(data), "--out", str(report)]) == EXIT_INPUT

    svg = tmp_path / "plot.svg"
    before = rollouts.read_bytes()
    assert main(["-q", "plot", "--rollouts", str(rollouts), "--out", str(svg)]) == EXIT_OK
    assert rollouts.read_bytes() == before
    text = svg.read_text()
    assert text.startswith("<svg") or text.startswith("<?xml")
    svg2 = tmp_path / "plot2.svg"
    main(["-q", "plot", "--rollouts", str(rollouts), "--out", str(svg2)])
    assert svg2.read_bytes() == svg.read_bytes()


def test_eval_of_truth_against_itself(tmp_path, workspace):
    _, data, _ = workspace
    report = tmp_path / "m.csv"
    assert main(["-q", "eval", "--rollouts", str(data), "--truth", str(data), "--out", str(report)]) == EXIT_OK
    rows = list(csv.DictReader(open(report)))
    assert [float(r["min_ade"]) for r in rows] == [0.0, 0.0]
    assert set(rows[0]) == {"scenario_id", "num_rollouts", "min_ade", "collision_rate", "offroad_rate"}


def test_bound_command(capsys):
    assert main(["-q", "bound", "--k", "1", "--m", "0.5", "--tau-list", "1.0,0.5,0.25,0.1,0.05",
                 "--substeps", "200"]) == EXIT_OK
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0].startswith("tau,empirical_gap,analytic_bound")
    assert len(lines) == 6 and all(line.endswith("true") for line in lines[1:])
    # a declared constant smaller than the true one is flagged
    assert main(["-q", "bound", "--k", "0.5", "--m", "0.5", "--tau-list", "0.5", "--substeps", "100"]) == EXIT_CHECK
    assert main(["-q", "bound", "--k", "1", "--m", "0.5", "--tau-list", ""]) == EXIT_USAGE


def test_oracle_command(capsys):
    assert main(["-q", "oracle"]) == EXIT_OK
    out = capsys.readouterr().out
    assert out.count("PASS") >= 3 and "FAIL" not in out


def test_gradcheck_command(capsys):
    assert main(["-q", "gradcheck", "--seeds", "3"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "max rel err = " in out and "FAIL" not in out
