import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from limo.errors import DataError, DegeneratePoseError, FormatError
from limo.kinematics import (
    FeatureSequence,
    MotionSequence,
    SkeletonDefinition,
    build_body_frame,
    extract_axial_rotation,
    extract_ball_socket,
    extract_hinge,
    extract_pose_features,
    extract_sequence,
    extract_spinal,
    features_from_bytes,
    features_to_bytes,
    forward_kinematics,
    load_features_bin,
    load_features_csv,
    load_motion,
    rot_y,
    sample_features,
    save_features_bin,
    save_features_csv,
    save_motion,
)

ANGLE_COLS = [i for i in range(29) if i not in (3, 4, 5)]

# high-precision values (mpmath, 40 digits) of the flexion/adduction formulas
BALL_SOCKET_ORACLE = (0.3587706702705722204, 0.43785649906177962448)  # v = (0.3, -0.8, 0.4)
SPINAL_ORACLE = (0.21866894587394196204, -0.3145897425602661177)  # v = (0.2, 0.9, -0.3)


def rest_frame(skeleton):
    return skeleton.rest_positions.copy()


# -- skeleton -------------------------------------------------------------------


def test_default_skeleton_layout(skeleton):
    assert skeleton.n_joints == 22
    assert sum(skeleton.dofs) == 29
    assert skeleton.dofs == (3, 3, 3, 3, 1, 1, 1, 1, 3, 3, 3, 1, 1, 2)
    assert skeleton.feature_names[:6] == (
        "pelvis_tilt", "pelvis_list", "pelvis_rotation", "pelvis_tx", "pelvis_ty", "pelvis_tz",
    )
    assert skeleton.fk_issues() == []


def test_skeleton_round_trips_through_json(skeleton, tmp_path):
    path = tmp_path / "skel.json"
    skeleton.save(path)
    again = SkeletonDefinition.load(path)
    assert again.joint_names == skeleton.joint_names
    assert again.feature_joints == skeleton.feature_joints
    np.testing.assert_array_equal(again.rest_offsets, skeleton.rest_offsets)


def test_skeleton_rejects_cycles_and_bad_dof(skeleton):
    d = skeleton.to_dict()
    d["parents"] = list(d["parents"])
    d["parents"][1] = 4  # left_hip <- left_knee <- left_hip
    with pytest.raises(DataError):
        SkeletonDefinition.from_dict(d)
    d = skeleton.to_dict()
    d["feature_joints"] = d["feature_joints"][:-1]
    with pytest.raises(DataError):
        SkeletonDefinition.from_dict(d)


def test_ball_socket_requires_grandchild(skeleton):
    d = skeleton.to_dict()
    hip = next(fj for fj in d["feature_joints"] if fj["name"] == "hip_l")
    hip["joints"] = hip["joints"][:2]
    with pytest.raises(DataError):
        SkeletonDefinition.from_dict(d)


# -- body frame ---------------------------------------------------------------


def test_body_frame_of_rest_pose_is_identity(skeleton):
    bf = build_body_frame(rest_frame(skeleton), skeleton)
    np.testing.assert_allclose(bf.rotation, np.eye(3), atol=1e-15)
    np.testing.assert_array_equal(bf.origin, np.zeros(3))


def test_body_frame_rotates_with_heading(skeleton):
    frame = rest_frame(skeleton) @ rot_y(np.pi / 2).T
    bf = build_body_frame(frame, skeleton)
    np.testing.assert_allclose(bf.rotation, rot_y(np.pi / 2), atol=1e-12)


def test_body_frame_orthonormal_on_random_poses(skeleton, rng):
    rows = sample_features(rng, 1000, skeleton)
    frames = forward_kinematics(FeatureSequence(20.0, rows), skeleton).frames
    for frame in frames:
        R = build_body_frame(frame, skeleton).rotation
        np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-9)
        assert abs(np.linalg.det(R) - 1.0) < 1e-9


def test_body_frame_degenerate_hips(skeleton):
    frame = rest_frame(skeleton)
    frame[2] = frame[1]
    with pytest.raises(DegeneratePoseError):
        build_body_frame(frame, skeleton)


# -- per-joint angles ---------------------------------------------------------------


def test_ball_socket_examples():
    assert extract_ball_socket([0.0, -1.0, 0.0]) == (0.0, 0.0)
    flex, add = extract_ball_socket([1.0, 0.0, 0.0])
    assert flex == pytest.approx(math.pi / 2, abs=1e-15) and add == 0.0
    flex, add = extract_ball_socket([0.3, -0.8, 0.4])
    assert abs(flex - BALL_SOCKET_ORACLE[0]) < 1e-12
    assert abs(add - BALL_SOCKET_ORACLE[1]) < 1e-12


def test_ball_socket_pole_is_flagged():
    diag = []
    _, add = extract_ball_socket(np.array([0.0, 0.0, -2.0]), diag)
    assert add == pytest.approx(-math.pi / 2)
    assert diag


def test_ball_socket_zero_vector():
    with pytest.raises(DegeneratePoseError):
        extract_ball_socket([0.0, 0.0, 0.0])


def test_spinal_examples():
    assert extract_spinal([0.0, 1.0, 0.0]) == (0.0, 0.0)
    a = 0.37
    ext, bend = extract_spinal([math.sin(a), math.cos(a), 0.0])
    assert ext == pytest.approx(a, abs=1e-15) and bend == 0.0
    ext, bend = extract_spinal([0.2, 0.9, -0.3])
    assert abs(ext - SPINAL_ORACLE[0]) < 1e-12
    assert abs(bend - SPINAL_ORACLE[1]) < 1e-12


def test_hinge_examples():
    assert extract_hinge([0, -1, 0], [0, -2, 0]) == 0.0
    assert extract_hinge([1, 0, 0], [0, 1, 0]) == pytest.approx(math.pi / 2, abs=1e-15)
    assert abs(extract_hinge([1, 0, 0], [0.6, -0.8, 0]) - 0.92729521800161223243) < 1e-15
    with pytest.raises(DegeneratePoseError):
        extract_hinge([0, 0, 0], [1, 0, 0])


def test_axial_rotation_examples():
    I = np.eye(3)
    child = np.array([0.0, -1.0, 0.0])
    assert extract_axial_rotation(I, child, child + [1.0, 0.0, 0.0]) == 0.0
    assert extract_axial_rotation(I, child, child + [0.0, 0.0, 1.0]) == pytest.approx(math.pi / 2, abs=1e-15)
    diag = []
    assert extract_axial_rotation(I, child, child * 2, diagnostics=diag) == 0.0
    assert diag


@given(st.floats(-3.0, 3.0), st.floats(-2.5, 2.5), st.floats(-1.2, 1.2))
def test_axial_rotation_recovers_known_twist(twist, flex, add):
    from limo.kinematics import swing_matrix, twist_matrix, DOWN

    R = swing_matrix(flex, add, DOWN) @ twist_matrix(twist, DOWN)
    child = R @ DOWN
    grand = child + R @ np.array([1.0, 0.0, 0.0])
    got = extract_axial_rotation(np.eye(3), child, grand)
    assert abs(math.remainder(got - twist, 2 * math.pi)) < 1e-9


# -- whole pose -------------------------------------------------------------------------


def test_rest_pose_features(skeleton):
    pf = extract_pose_features(rest_frame(skeleton), skeleton)
    assert np.all(np.abs(pf.values[ANGLE_COLS]) < 1e-9)
    np.testing.assert_array_equal(pf.values[3:6], np.zeros(3))
    moved = rest_frame(skeleton) + [1.0, 2.0, 3.0]
    pm = extract_pose_features(moved, skeleton)
    np.testing.assert_array_equal(pm.values[ANGLE_COLS], pf.values[ANGLE_COLS])
    np.testing.assert_array_equal(pm.values[3:6], [1.0, 2.0, 3.0])


def test_fk_of_zero_features_is_rest_pose(skeleton):
    m = forward_kinematics(FeatureSequence(20.0, np.zeros((2, 29))), skeleton)
    np.testing.assert_allclose(m.frames[0], skeleton.rest_positions, atol=1e-15)


def test_fk_pure_translation_path(skeleton):
    rows = np.zeros((5, 29))
    rows[:, 3:6] = np.arange(15).reshape(5, 3) * 0.1
    m = forward_kinematics(FeatureSequence(20.0, rows), skeleton)
    for t in range(5):
        np.testing.assert_allclose(m.frames[t], skeleton.rest_positions + rows[t, 3:6], atol=1e-15)


def test_round_trip_random_features(skeleton, rng):
    rows = sample_features(rng, 100, skeleton)
    motion = forward_kinematics(FeatureSequence(20.0, rows), skeleton)
    back = extract_sequence(motion, skeleton)
    assert back.rows.shape == rows.shape
    assert np.max(np.abs(back.rows - rows)) < 1e-6
    again = forward_kinematics(back, skeleton)
    assert np.max(np.abs(again.frames - motion.frames)) < 1e-6


def test_pelvis_translation_is_world_position(skeleton, rng):
    rows = sample_features(rng, 4, skeleton)
    motion = forward_kinematics(FeatureSequence(20.0, rows), skeleton)
    np.testing.assert_allclose(extract_sequence(motion, skeleton).rows[:, 3:6], motion.frames[:, 0], atol=0)


@given(st.integers(0, 2**32 - 1), st.floats(-50, 50), st.floats(-50, 50), st.floats(-50, 50))
def test_translation_invariance(skeleton, seed, cx, cy, cz):
    rng = np.random.default_rng(seed)
    rows = sample_features(rng, 3, skeleton)
    motion = forward_kinematics(FeatureSequence(20.0, rows), skeleton)
    c = np.array([cx, cy, cz])
    a = extract_sequence(motion, skeleton).rows
    b = extract_sequence(MotionSequence(20.0, motion.frames + c), skeleton).rows
    assert np.max(np.abs(a[:, ANGLE_COLS] - b[:, ANGLE_COLS])) < 1e-9
    assert np.max(np.abs(b[:, 3:6] - a[:, 3:6] - c)) < 1e-12


@given(st.integers(0, 2**32 - 1), st.floats(-math.pi, math.pi))
def test_heading_equivariance(skeleton, seed, alpha):
    rng = np.random.default_rng(seed)
    rows = sample_features(rng, 3, skeleton)
    motion = forward_kinematics(FeatureSequence(20.0, rows), skeleton)
    R = rot_y(alpha)
    a = extract_sequence(motion, skeleton).rows
    b = extract_sequence(MotionSequence(20.0, motion.frames @ R.T), skeleton).rows
    limb = [i for i in ANGLE_COLS if i != 2]
    assert np.max(np.abs(a[:, limb] - b[:, limb])) < 1e-9
    dr = (b[:, 2] - a[:, 2] - alpha + math.pi) % (2 * math.pi) - math.pi
    assert np.max(np.abs(dr)) < 1e-9
    np.testing.assert_allclose(b[:, 3:6], a[:, 3:6] @ R.T, atol=1e-12)


@given(st.integers(0, 2**32 - 1))
def test_angles_stay_in_range(skeleton, seed):
    rng = np.random.default_rng(seed)
    frames = rng.normal(0, 0.5, (4, 22, 3))
    rows = extract_sequence(MotionSequence(20.0, frames), skeleton).rows
    assert np.all(np.isfinite(rows))
    assert np.all(rows[:, ANGLE_COLS] > -math.pi) and np.all(rows[:, ANGLE_COLS] <= math.pi)


def test_sequence_error_reports_frame(skeleton):
    frames = np.stack([rest_frame(skeleton)] * 3)
    frames[2, 4] = frames[2, 1]  # zero-length left thigh
    with pytest.raises(DegeneratePoseError, match="frame 2"):
        extract_sequence(MotionSequence(20.0, frames), skeleton)


def test_fk_rejects_out_of_range_features(skeleton):
    rows = np.zeros((1, 29))
    rows[0, 12] = -0.5  # knee folded backwards
    with pytest.raises(DataError):
        forward_kinematics(FeatureSequence(20.0, rows), skeleton)


# -- files ------------------------------------------------------------------------------------


def test_motion_file_round_trip(skeleton, tmp_path, rng):
    motion = forward_kinematics(FeatureSequence(30.0, sample_features(rng, 3, skeleton)), skeleton)
    path = tmp_path / "m.json"
    save_motion(path, motion, skeleton)
    data = json.loads(path.read_text())
    assert set(data) == {"fps", "joint_names", "parents", "frames"}
    back = load_motion(path)
    assert back.fps == 30.0
    np.testing.assert_allclose(back.frames, motion.frames, atol=1e-9)


def test_malformed_motion_file(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{"fps": 20}')
    with pytest.raises(DataError):
        load_motion(path)


def test_feature_files_round_trip(skeleton, tmp_path, rng):
    fs = extract_sequence(forward_kinematics(FeatureSequence(20.0, sample_features(rng, 5, skeleton)), skeleton), skeleton)
    save_features_csv(tmp_path / "f.csv", fs)
    back = load_features_csv(tmp_path / "f.csv")
    np.testing.assert_array_equal(back.rows, fs.rows)
    assert back.names == skeleton.feature_names
    save_features_bin(tmp_path / "f.bin", fs)
    raw = (tmp_path / "f.bin").read_bytes()
    assert raw[:4] == b"LIFE" and len(raw) == 8 + 5 * 29 * 4
    np.testing.assert_array_equal(load_features_bin(tmp_path / "f.bin").rows, fs.rows.astype(np.float32))


def test_feature_binary_rejects_truncation(skeleton):
    buf = features_to_bytes(FeatureSequence(20.0, np.zeros((2, 29))))
    with pytest.raises(FormatError):
        features_from_bytes(buf[:-4])
    with pytest.raises(FormatError):
        features_from_bytes(b"XXXX" + buf[4:])
