import json

import numpy as np
import pytest

from limo.kinematics import extract_sequence
from limo.synth import ACTIONS, SPEEDS, activation, caption, generate_dataset, write_dataset


@pytest.fixture(scope="module")
def small():
    return generate_dataset(12, 3, 3, seed=4)


def test_splits_and_ids(small):
    assert [len(small.split(s)) for s in ("train", "val", "test")] == [12, 3, 3]
    assert len({it.id for it in small.items}) == 18


def test_generation_is_deterministic(small):
    again = generate_dataset(12, 3, 3, seed=4)
    for a, b in zip(small.items, again.items):
        assert a.text == b.text
        assert np.array_equal(a.motion.frames, b.motion.frames)


def test_features_recoverable_by_ik(small):
    for it in small.items:
        rows = extract_sequence(it.motion, small.skeleton).rows
        assert np.max(np.abs(rows - it.features)) < 1e-9


def test_only_the_named_degree_of_freedom_moves(small):
    names = [fj.name for fj in small.skeleton.feature_joints]
    for it in small.items:
        a = ACTIONS[it.actions[0]]
        col = small.skeleton.slices[names.index(a.joint)].start + a.column
        moving = np.flatnonzero(np.ptp(it.features, axis=0) > 1e-6)
        assert moving.tolist() == [col]


def test_caption_names_joint_and_speed(small):
    for it in small.items:
        a = ACTIONS[it.actions[0]]
        assert a.noun in it.text and it.speed in it.text
        assert it.label == it.text
    assert caption(("knee_l/0",), "slowly") == "a person bends the left knee slowly"
    assert caption(("hip_r/1",), "quickly") == "a person swings the right hip sideways quickly"


def test_multi_joint_items_use_distinct_joints():
    ds = generate_dataset(10, 0, 0, seed=1, joints_per_item=3, with_motion=False)
    for it in ds.items:
        assert len(set(it.joints)) == 3
        assert it.text.count(" and ") == 2 and it.text.endswith(it.speed)


def test_activation_whole_cycles():
    a = activation(100, 12)
    assert a[0] == 0.0 and np.all(a[96:] == 0.0)
    assert a.max() == pytest.approx(1.0)
    assert activation(5, SPEEDS["slowly"]).shape == (5,)


def test_write_dataset(small, tmp_path):
    path = write_dataset(small, tmp_path)
    manifest = json.loads(path.read_text())
    assert manifest["seed"] == 4 and len(manifest["items"]) == 18
    first = manifest["items"][0]
    assert (tmp_path / first["motion"]).exists()
    assert first["joints"] == list(small.items[0].joints)


def test_optional_drift_moves_only_horizontal_translation(monkeypatch):
    import limo.synth

    monkeypatch.setattr(limo.synth, "DRIFT_SPEED", 0.2)
    ds = generate_dataset(4, 0, 0, seed=2, with_motion=False)
    for it in ds.items:
        moving = set(np.flatnonzero(np.ptp(it.features, axis=0) > 1e-6).tolist())
        assert {3, 5} <= moving and 4 not in moving
