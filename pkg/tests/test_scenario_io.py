import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from niva.checkpoint import (DigestMismatch, VersionMismatch, checkpoint_bytes, parse_checkpoint,
                             read_checkpoint, write_checkpoint)
from niva.config import ModelConfig
from niva.encoders import AgentState, MapFeature, wrap_angle
from niva.metrics import (cluster_purity, collision_rate, metrics_csv, min_ade, nearest_exit,
                          offroad_rate)
from niva.model import Niva
from niva.scenario import (KINDS, MAX_HEADING_STEP, MAX_SPEED, FormatError, Scenario, generate_toy_dataset,
                           intersection_layout, read_scenario, scenario_from_dict, scenario_to_dict,
                           write_scenario)

from conftest import TINY


def test_intersection_has_three_distinct_exits():
    lay = intersection_layout()
    exits = [lay.lanes[lane] for lane in lay.exits.values()]
    assert len(exits) == 3 and len(set(lay.exits.values())) == 3
    ends = np.array([e[-1] for e in exits])
    assert min(np.linalg.norm(ends[i] - ends[j]) for i in range(3) for j in range(i + 1, 3)) > 50


@pytest.mark.parametrize("kind", KINDS)
def test_generator_limits(kind):
    data = generate_toy_dataset(kind, 30, seed=4)
    for s in data:
        poses, speed, _, _ = s.track_arrays()
        assert np.all((speed >= 0) & (speed <= MAX_SPEED))
        assert np.all(np.abs(wrap_angle(np.diff(poses[..., 2], axis=0))) <= MAX_HEADING_STEP)
        step = np.hypot(*np.diff(poses[..., :2], axis=0).transpose(2, 0, 1))
        assert np.all(step / s.step_seconds <= MAX_SPEED)
        assert s.step_seconds == 0.1
        assert len(s.metadata["intentions"]) == s.num_agents


def test_generator_rejects_bad_input():
    with pytest.raises(ValueError):
        generate_toy_dataset("roundabout", 1)
    with pytest.raises(ValueError):
        generate_toy_dataset("merge", 0)


def test_same_seed_gives_byte_identical_files(tmp_path):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    write_scenario(a, generate_toy_dataset("merge", 5, seed=2))
    write_scenario(b, generate_toy_dataset("merge", 5, seed=2))
    assert a.read_bytes() == b.read_bytes()
    write_scenario(b, generate_toy_dataset("merge", 5, seed=3))
    assert a.read_bytes() != b.read_bytes()


def test_scenario_round_trip(tmp_path, intersection_scenarios):
    path = tmp_path / "s.jsonl"
    write_scenario(path, intersection_scenarios)
    back = read_scenario(path)
    assert back == intersection_scenarios
    for s in back:
        assert s.track_arrays()[0].tobytes() == intersection_scenarios[back.index(s)].track_arrays()[0].tobytes()
    lines = path.read_text().splitlines()
    assert len(lines) == len(intersection_scenarios)


def test_scenario_invariants():
    a = AgentState((0, 0), 0.0, 1.0)
    with pytest.raises(ValueError):
        Scenario("x", [])
    with pytest.raises(ValueError):
        Scenario("x", [[a], [a, a]])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=2, max_size=2),
       st.floats(-10, 10, allow_nan=False), st.floats(0, 40, allow_nan=False))
def test_state_values_round_trip_exactly(pos, heading, speed):
    s = Scenario("p", [[AgentState(pos, heading, speed)]])
    assert scenario_from_dict(scenario_to_dict(s)) == s


def test_scenario_version_and_malformed_errors(intersection_scenarios):
    d = scenario_to_dict(intersection_scenarios[0])
    with pytest.raises(FormatError):
        scenario_from_dict(dict(d, format_version=99))
    with pytest.raises(FormatError):
        scenario_from_dict({k: v for k, v in d.items() if k != "history"})
    broken = scenario_to_dict(intersection_scenarios[0])
    broken["history"][0][0]["kind"] = "spaceship"
    with pytest.raises(FormatError):
        scenario_from_dict(broken)


def test_malformed_line_reported(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text("{not json}\n")
    with pytest.raises(FormatError, match="bad.jsonl:1"):
        read_scenario(path)


@pytest.fixture
def model():
    return Niva(ModelConfig(**TINY))


def test_checkpoint_round_trip_is_byte_identical(tmp_path, model):
    first, second = tmp_path / "a.nivack", tmp_path / "b.nivack"
    write_checkpoint(first, model, {"note": "x"})
    loaded, config = read_checkpoint(first)
    assert config["note"] == "x"
    write_checkpoint(second, loaded, {"note": "x"})
    assert first.read_bytes() == second.read_bytes()
    for (name, a), b in zip(model.named_parameters(), loaded.parameters()):
        np.testing.assert_array_equal(a.data.astype(np.float32), b.data.astype(np.float32), err_msg=name)


def test_checkpoint_errors(tmp_path, model):
    data = bytearray(checkpoint_bytes({"model": {}}, model.state_dict()))
    corrupt = bytes(data[:-1]) + bytes([data[-1] ^ 1])
    with pytest.raises(DigestMismatch):
        parse_checkpoint(corrupt)
    versioned = bytes(data[:4]) + struct.pack("<I", 7) + bytes(data[8:])
    with pytest.raises(VersionMismatch):
        parse_checkpoint(versioned)
    with pytest.raises(FormatError):
        parse_checkpoint(b"JUNK" + bytes(data[4:]))
    # a header that does not match its tensors is rejected rather than half loaded
    path = tmp_path / "mismatch.nivack"
    other = Niva(ModelConfig(**dict(TINY, model_dim=8, num_heads=2)))
    path.write_bytes(checkpoint_bytes({"model": {**TINY, "model_dim": 32}}, other.state_dict()))
    with pytest.raises(FormatError):
        read_checkpoint(path)


def test_min_ade_examples():
    rng = np.random.default_rng(0)
    truth = rng.normal(size=(10, 3, 2))
    assert min_ade([truth], truth) == 0.0
    assert min_ade([truth + [3.0, 4.0]], truth) == pytest.approx(5.0, abs=1e-12)
    with pytest.raises(ValueError):
        min_ade([truth[:5]], truth)
    with pytest.raises(ValueError):
        min_ade([], truth)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(1, 6))
def test_min_ade_nonincreasing_when_rollouts_appended(seed, r):
    rng = np.random.default_rng(seed)
    truth = rng.normal(size=(5, 2, 2))
    rollouts = [truth + rng.normal(size=truth.shape) for _ in range(r + 1)]
    values = [min_ade(rollouts[:i], truth) for i in range(1, r + 2)]
    assert all(a >= b for a, b in zip(values, values[1:]))


def test_collision_examples():
    t = np.linspace(0, 10, 11)
    lone = np.stack([t, 0 * t, 0 * t], -1)[:, None]
    assert collision_rate(lone) == 0.0
    a = np.stack([t, 0 * t, 0 * t], -1)
    b = np.stack([10 - t, 0 * t, np.full_like(t, np.pi)], -1)
    assert collision_rate(np.stack([a, b], 1)) == 1.0
    far = b + [0.0, 10.0, 0.0]
    assert collision_rate(np.stack([a, far], 1)) == 0.0
    with pytest.raises(ValueError):
        collision_rate(np.stack([a, b], 1), kinds=["vehicle", "bus"])


def test_offroad_examples():
    lane = MapFeature(np.array([[0.0, 0.0], [50.0, 0.0]]), "lane-center", 0)
    on = np.stack([np.linspace(0, 50, 20), np.zeros(20), np.zeros(20)], -1)[:, None]
    assert offroad_rate(on, [lane]) == 0.0
    off = on + [0.0, 5.0, 0.0]
    assert offroad_rate(off, [lane]) == 1.0
    lay = intersection_layout()
    feats = [MapFeature(p, "lane-center", k) for k, p in lay.lanes.items()]
    route = lay.routes[0][::5]
    assert offroad_rate(np.concatenate([route, np.zeros((len(route), 1))], 1)[:, None], feats) == 0.0


def test_metrics_are_deterministic():
    rng = np.random.default_rng(3)
    truth = rng.normal(size=(8, 2, 3))
    rollouts = truth + rng.normal(size=(4, 8, 2, 3))
    assert min_ade(rollouts, truth) == min_ade(rollouts.copy(), truth.copy())
    assert collision_rate(rollouts[0] * 3) == collision_rate(rollouts[0] * 3)


def test_exit_assignment_and_purity():
    lay = intersection_layout()
    exits = {k: lay.lanes[lane] for k, lane in lay.exits.items()}
    assert nearest_exit((-60.0, 0.5), exits) == 0
    assert nearest_exit((0.2, 60.0), exits) == 1
    assert nearest_exit((55.0, -0.3), exits) == 2
    assert cluster_purity([(0, 1), (0, 1), (1, 2), (1, 0)]) == 0.75
    assert metrics_csv([{"a": 1, "b": 0.5}]) == "a,b\n1,0.5\n"
