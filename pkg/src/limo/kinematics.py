"""Joint-angle kinematics for SMPL-like skeletons.

Raw joint positions are turned into a 29-dimensional, translation-invariant
feature vector per frame (pelvis orientation and translation plus anatomical
angles of 12 limb/spine joints), and turned back into positions by forward
kinematics.

Conventions:
    * World frame is y-up.
    * Every body-local frame uses x = forward, y = up, z = right.
    * Limbs hang along local -y in the neutral pose, spine segments point
      along local +y.
    * Angles are radians in (-pi, pi]; pelvis translation is in meters and
      stored in world coordinates.

Both directions share one rotation model: a segment's local rotation is a
swing ``Rz(flex) @ Rx(-add)`` (limbs) or ``Rz(-ext) @ Rx(bend)`` (spine)
followed by a twist about the segment axis; hinges rotate about local z.
Inverse kinematics measures exactly the quantities forward kinematics
composes, so ``extract_sequence(forward_kinematics(f)) == f`` to rounding.
"""

from __future__ import annotations

import csv
import io
import json
import struct
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from pathlib import Path

import numpy as np

from ._io import atomic_open, check_magic, unpack_from, write_atomic
from .errors import DataError, DegeneratePoseError, FormatError

EPS = 1e-8

UP = np.array([0.0, 1.0, 0.0])
DOWN = np.array([0.0, -1.0, 0.0])
FORWARD = np.array([1.0, 0.0, 0.0])

KINDS = ("pelvis_orientation", "pelvis_translation", "ball_socket", "hinge", "spinal3", "spinal2")
KIND_DOF = {
    "pelvis_orientation": 3,
    "pelvis_translation": 3,
    "ball_socket": 3,
    "hinge": 1,
    "spinal3": 3,
    "spinal2": 2,
}
COMPONENTS = {
    "pelvis_orientation": ("tilt", "list", "rotation"),
    "pelvis_translation": ("tx", "ty", "tz"),
    "ball_socket": ("flexion", "adduction", "rotation"),
    "hinge": ("bend",),
    "spinal3": ("extension", "bending", "rotation"),
    "spinal2": ("flexion", "adduction"),
}
# number of named source joints each kind expects
KIND_JOINTS = {
    "pelvis_orientation": 4,  # pelvis, left hip, right hip, spine
    "pelvis_translation": 1,
    "ball_socket": 3,  # joint, child, grandchild
    "hinge": 2,  # joint, child (the upper segment comes from the joint's parent)
    "spinal3": 3,
    "spinal2": 2,
}

LIFE_MAGIC = b"LIFE"


# ---------------------------------------------------------------------------
# rotation helpers (all vectorised over leading axes)


def wrap_angle(a):
    """Map angles into (-pi, pi]."""
    a = np.asarray(a, dtype=float)
    w = np.mod(a + np.pi, 2.0 * np.pi) - np.pi
    w = np.where(w <= -np.pi, w + 2.0 * np.pi, w)
    # keep exact inputs already in range bit-identical
    return np.where((a > -np.pi) & (a <= np.pi), a, w)


def _rot(axis: int, angle) -> np.ndarray:
    angle = np.asarray(angle, dtype=float)
    c, s = np.cos(angle), np.sin(angle)
    out = np.zeros(angle.shape + (3, 3))
    i, j = [(1, 2), (2, 0), (0, 1)][axis]
    out[..., axis, axis] = 1.0
    out[..., i, i] = c
    out[..., j, j] = c
    out[..., i, j] = -s
    out[..., j, i] = s
    return out


def rot_x(angle) -> np.ndarray:
    return _rot(0, angle)


def rot_y(angle) -> np.ndarray:
    return _rot(1, angle)


def rot_z(angle) -> np.ndarray:
    return _rot(2, angle)


def _norm(v: np.ndarray) -> np.ndarray:
    return np.linalg.norm(v, axis=-1)


def _mv(m: np.ndarray, v: np.ndarray) -> np.ndarray:
    return np.einsum("...ij,...j->...i", m, v)


def _mtv(m: np.ndarray, v: np.ndarray) -> np.ndarray:
    return np.einsum("...ji,...j->...i", m, v)


def swing_matrix(first, second, neutral: np.ndarray = DOWN) -> np.ndarray:
    """Rotation taking ``neutral`` onto the direction described by two swing angles.

    For limbs (neutral -y) the angles are (flexion, adduction); for spine
    segments (neutral +y) they are (extension, bending).
    """
    if neutral[1] < 0:
        return rot_z(first) @ rot_x(-np.asarray(second))
    return rot_z(-np.asarray(first)) @ rot_x(second)


def twist_matrix(angle, neutral: np.ndarray = DOWN) -> np.ndarray:
    """Right-handed rotation by ``angle`` about the local neutral axis."""
    return rot_y(np.asarray(angle) * np.sign(neutral[1]))


def euler_zxy(tilt, list_, rotation) -> np.ndarray:
    """Pelvis rotation ``Ry(rotation) @ Rx(list) @ Rz(tilt)``.

    Elementary rotations are applied about the fixed world axes in the order
    Z, X, Y, so a heading change about world-up only moves ``rotation``.
    """
    return rot_y(rotation) @ rot_x(list_) @ rot_z(tilt)


# ---------------------------------------------------------------------------
# skeleton


@dataclass(frozen=True)
class FeatureJoint:
    """One of the 14 feature joints.

    ``joints`` holds source joint indices whose meaning depends on ``kind``
    (see ``KIND_JOINTS``). ``twist_reference`` is the local direction, normal
    to the neutral axis, in which the grandchild lies at zero twist.
    ``flex_sign`` chooses the bending direction of a hinge about local z.
    """

    name: str
    kind: str
    joints: tuple[int, ...]
    dof: int
    twist_reference: tuple[float, float, float] | None = None
    flex_sign: int = 1

    @property
    def neutral(self) -> np.ndarray:
        return UP if self.kind.startswith("spinal") else DOWN

    @property
    def components(self) -> tuple[str, ...]:
        return COMPONENTS[self.kind]

    def column_names(self) -> list[str]:
        if self.kind.startswith("pelvis"):
            return [f"pelvis_{c}" for c in self.components]
        return [f"{self.name}_{c}" for c in self.components]


@dataclass(frozen=True)
class SkeletonDefinition:
    joint_names: tuple[str, ...]
    parent_index: tuple[int, ...]
    rest_offsets: np.ndarray
    feature_joints: tuple[FeatureJoint, ...]
    name: str = "custom"

    def __post_init__(self):
        offsets = np.asarray(self.rest_offsets, dtype=float)
        object.__setattr__(self, "rest_offsets", offsets)
        n = len(self.joint_names)
        if len(self.parent_index) != n or offsets.shape != (n, 3):
            raise DataError("skeleton: joint_names, parents and rest_offsets disagree in length")
        if list(self.parent_index).count(-1) != 1:
            raise DataError("skeleton: parents must contain exactly one root (-1)")
        if self.parent_index[0] != -1:
            raise DataError("skeleton: joint 0 must be the pelvis root")
        self.order  # raises on cycles
        if len(self.feature_joints) != 14:
            raise DataError(f"skeleton: expected 14 feature joints, got {len(self.feature_joints)}")
        if sum(fj.dof for fj in self.feature_joints) != 29:
            raise DataError("skeleton: feature joint dof must sum to 29")
        for fj in self.feature_joints:
            if fj.kind not in KINDS:
                raise DataError(f"skeleton: unknown kind {fj.kind!r}")
            if fj.dof != KIND_DOF[fj.kind]:
                raise DataError(f"skeleton: {fj.name} has dof {fj.dof}, kind {fj.kind} needs {KIND_DOF[fj.kind]}")
            if len(fj.joints) != KIND_JOINTS[fj.kind]:
                raise DataError(f"skeleton: {fj.name} needs {KIND_JOINTS[fj.kind]} source joints")
            if any(not 0 <= j < n for j in fj.joints):
                raise DataError(f"skeleton: {fj.name} references a joint out of range")
            if fj.kind in ("ball_socket", "spinal3"):
                if fj.twist_reference is None:
                    raise DataError(f"skeleton: {fj.name} needs a twist_reference")
                ref = np.asarray(fj.twist_reference, dtype=float)
                if abs(np.linalg.norm(ref) - 1.0) > 1e-9 or abs(ref @ fj.neutral) > 1e-9:
                    raise DataError(f"skeleton: {fj.name} twist_reference must be a unit vector normal to the neutral axis")
            if fj.kind in ("ball_socket", "hinge", "spinal3", "spinal2"):
                joint, child = fj.joints[0], fj.joints[1]
                if joint == 0:
                    raise DataError(f"skeleton: {fj.name} cannot sit on the root")
                if joint not in self.ancestors(child):
                    raise DataError(f"skeleton: {fj.name}: child must descend from joint")
                if fj.kind in ("ball_socket", "spinal3") and child not in self.ancestors(fj.joints[2]):
                    raise DataError(f"skeleton: {fj.name}: grandchild must descend from child")
            if fj.kind == "hinge" and fj.flex_sign not in (1, -1):
                raise DataError(f"skeleton: {fj.name} flex_sign must be +1 or -1")
        local = [fj.joints[0] for fj in self.feature_joints if not fj.kind.startswith("pelvis")]
        if len(set(local)) != len(local):
            raise DataError("skeleton: two feature joints share a joint")

    # -- structure ---------------------------------------------------------

    @property
    def n_joints(self) -> int:
        return len(self.joint_names)

    @cached_property
    def order(self) -> tuple[int, ...]:
        """Joint indices with every parent before its children."""
        children: dict[int, list[int]] = {i: [] for i in range(self.n_joints)}
        for j, p in enumerate(self.parent_index):
            if p >= 0:
                if not 0 <= p < self.n_joints:
                    raise DataError(f"skeleton: joint {j} has invalid parent {p}")
                children[p].append(j)
        out, stack = [], [0]
        while stack:
            j = stack.pop()
            out.append(j)
            stack.extend(reversed(children[j]))
        if len(out) != self.n_joints:
            raise DataError("skeleton: parents do not form a tree rooted at joint 0")
        return tuple(out)

    def ancestors(self, j: int) -> list[int]:
        out = []
        while j >= 0:
            j = self.parent_index[j]
            if j >= 0:
                out.append(j)
        return out

    def index(self, name: str) -> int:
        try:
            return self.joint_names.index(name)
        except ValueError:
            raise DataError(f"skeleton: unknown joint {name!r}") from None

    @cached_property
    def dofs(self) -> tuple[int, ...]:
        return tuple(fj.dof for fj in self.feature_joints)

    @cached_property
    def slices(self) -> tuple[slice, ...]:
        bounds = np.concatenate([[0], np.cumsum(self.dofs)])
        return tuple(slice(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]))

    @cached_property
    def feature_names(self) -> tuple[str, ...]:
        return tuple(c for fj in self.feature_joints for c in fj.column_names())

    @cached_property
    def rest_positions(self) -> np.ndarray:
        pos = np.zeros((self.n_joints, 3))
        for j in self.order[1:]:
            pos[j] = pos[self.parent_index[j]] + self.rest_offsets[j]
        return pos

    @cached_property
    def _by_joint(self) -> dict[int, tuple[int, FeatureJoint]]:
        return {
            fj.joints[0]: (k, fj)
            for k, fj in enumerate(self.feature_joints)
            if not fj.kind.startswith("pelvis")
        }

    def _pelvis_entries(self) -> tuple[int, FeatureJoint, int, FeatureJoint]:
        ko = kt = None
        for k, fj in enumerate(self.feature_joints):
            if fj.kind == "pelvis_orientation":
                ko = k
            elif fj.kind == "pelvis_translation":
                kt = k
        if ko is None or kt is None:
            raise DataError("skeleton: pelvis orientation and translation entries are required")
        return ko, self.feature_joints[ko], kt, self.feature_joints[kt]

    def hinge_rest_angle(self, fj: FeatureJoint) -> float:
        """Unsigned rest-pose angle between the segments meeting at a hinge."""
        rp = self.rest_positions
        j, c = fj.joints
        return float(extract_hinge(rp[j] - rp[self.parent_index[j]], rp[c] - rp[j]))

    def fk_issues(self) -> list[str]:
        """Reasons forward kinematics cannot reproduce this skeleton's rest geometry.

        Forward kinematics assumes the rest pose is the neutral pose: limb
        segments hang straight down, spine segments point straight up, and the
        pelvis rest frame is the identity.
        """
        rp = self.rest_positions
        issues = []

        def parallel(v, axis):
            n = np.linalg.norm(v)
            return n > EPS and np.linalg.norm(v / n - axis) < 1e-9

        _, po, _, _ = self._pelvis_entries()
        pel, lh, rh, sp = po.joints
        lat = rp[rh] - rp[lh]
        if not parallel(lat, np.array([0.0, 0.0, 1.0])):
            issues.append("pelvis: rest hip axis must point along +z")
        s = rp[sp] - rp[pel]
        if not parallel(s - s[2] * np.array([0.0, 0.0, 1.0]), UP):
            issues.append("pelvis: rest spine vector must lie in the +y half of the yz plane")
        for fj in self.feature_joints:
            if fj.kind.startswith("pelvis"):
                continue
            j, c = fj.joints[0], fj.joints[1]
            between = [a for a in self.ancestors(c) if a != j and j in self.ancestors(a)]
            if any(a in self._by_joint for a in between):
                issues.append(f"{fj.name}: another feature joint lies between joint and child")
            if fj.kind == "hinge":
                upper = rp[j] - rp[self.parent_index[j]]
                lower = rp[c] - rp[j]
                if not parallel(upper, DOWN):
                    issues.append(f"{fj.name}: upper segment must hang along -y at rest")
                if abs(lower[2]) > 1e-9:
                    issues.append(f"{fj.name}: lower segment must lie in the sagittal plane at rest")
                signed = np.arctan2(lower[0], -lower[1])
                if abs(signed) > 1e-12 and np.sign(signed) != fj.flex_sign:
                    issues.append(f"{fj.name}: flex_sign disagrees with the rest bend direction")
                continue
            if not parallel(rp[c] - rp[j], fj.neutral):
                issues.append(f"{fj.name}: segment must lie along its neutral axis at rest")
            if fj.kind in ("ball_socket", "spinal3"):
                g = fj.joints[2]
                ref = np.asarray(fj.twist_reference)
                hinge = self._by_joint.get(c)
                if hinge is not None and hinge[1].kind == "hinge" and hinge[1].joints[1] == g:
                    bend_dir = hinge[1].flex_sign * np.array([1.0, 0.0, 0.0])
                    if np.linalg.norm(bend_dir - ref) > 1e-9:
                        issues.append(f"{fj.name}: twist_reference must match the child hinge bend direction")
                else:
                    w = rp[g] - rp[c]
                    w = w - (w @ fj.neutral) * fj.neutral
                    if not parallel(w, ref):
                        issues.append(f"{fj.name}: grandchild must lie along twist_reference at rest")
        return issues

    # -- serialisation -------------------------------------------------------

    @classmethod
    def from_dict(cls, data: dict) -> "SkeletonDefinition":
        try:
            names = tuple(data["joint_names"])
            parents = tuple(int(p) for p in data.get("parents", data.get("parent_index")))

            def idx(ref):
                return int(ref) if isinstance(ref, int) else names.index(ref)

            fjs = []
            for entry in data["feature_joints"]:
                ref = entry.get("twist_reference")
                fjs.append(
                    FeatureJoint(
                        name=entry["name"],
                        kind=entry["kind"],
                        joints=tuple(idx(r) for r in entry["joints"]),
                        dof=int(entry["dof"]),
                        twist_reference=None if ref is None else tuple(float(x) for x in ref),
                        flex_sign=int(entry.get("flex_sign", 1)),
                    )
                )
            return cls(
                joint_names=names,
                parent_index=parents,
                rest_offsets=np.asarray(data["rest_offsets"], dtype=float),
                feature_joints=tuple(fjs),
                name=data.get("name", "custom"),
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, DataError):
                raise
            raise DataError(f"skeleton: malformed definition ({exc})") from exc

    def to_dict(self) -> dict:
        feature_joints = []
        for fj in self.feature_joints:
            entry = {
                "name": fj.name,
                "kind": fj.kind,
                "dof": fj.dof,
                "joints": [self.joint_names[j] for j in fj.joints],
            }
            if fj.twist_reference is not None:
                entry["twist_reference"] = list(fj.twist_reference)
            if fj.kind == "hinge":
                entry["flex_sign"] = fj.flex_sign
            feature_joints.append(entry)
        return {
            "name": self.name,
            "joint_names": list(self.joint_names),
            "parents": list(self.parent_index),
            "rest_offsets": self.rest_offsets.tolist(),
            "feature_joints": feature_joints,
        }

    @classmethod
    def load(cls, path: str | Path) -> "SkeletonDefinition":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path: str | Path) -> None:
        write_atomic(path, json.dumps(self.to_dict(), indent=2))

    @classmethod
    def default(cls) -> "SkeletonDefinition":
        """The bundled 22-joint SMPL-like skeleton."""
        text = resources.files("limo.data").joinpath("smpl22.json").read_text(encoding="utf-8")
        return cls.from_dict(json.loads(text))


# ---------------------------------------------------------------------------
# data containers


@dataclass
class MotionSequence:
    fps: float
    frames: np.ndarray  # (T, J, 3) meters, world frame

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=float)
        if self.frames.ndim != 3 or self.frames.shape[2] != 3 or self.frames.shape[0] < 1:
            raise DataError(f"motion: frames must have shape (T>=1, J, 3), got {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise DataError("motion: non-finite coordinates")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True)
class BodyFrame:
    rotation: np.ndarray  # 3x3, columns = forward, up, right in world coordinates
    origin: np.ndarray


@dataclass
class PoseFeatures:
    values: np.ndarray  # (29,)
    flags: list[str] = field(default_factory=list)


@dataclass
class FeatureSequence:
    fps: float
    rows: np.ndarray  # (T, 29)
    names: tuple[str, ...] = ()
    flags: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=float)
        if self.rows.ndim != 2 or self.rows.shape[0] < 1:
            raise DataError(f"features: expected a (T>=1, 29) matrix, got {self.rows.shape}")

    @property
    def n_frames(self) -> int:
        return self.rows.shape[0]


# ---------------------------------------------------------------------------
# per-joint angle extraction


def build_body_frame(frame: np.ndarray, skeleton: SkeletonDefinition) -> BodyFrame:
    """Gravity-referenced body frame anchored at the pelvis.

    The lateral axis is the horizontal part of the left-hip to right-hip
    vector, the vertical axis is world up and forward completes a right-handed
    frame (``forward = up x lateral``).
    """
    frame = np.asarray(frame, dtype=float)
    _, po, _, _ = skeleton._pelvis_entries()
    pel, lh, rh, _ = po.joints
    lat = frame[rh] - frame[lh]
    if np.linalg.norm(lat) < EPS:
        raise DegeneratePoseError("left and right hips coincide")
    lat = lat * np.array([1.0, 0.0, 1.0])
    n = np.linalg.norm(lat)
    if n < EPS:
        raise DegeneratePoseError("hip axis is vertical; heading undefined")
    lat = lat / n
    fwd = np.cross(UP, lat)
    return BodyFrame(rotation=np.stack([fwd, UP.copy(), lat], axis=1), origin=frame[pel].copy())


def _heading_and_pelvis(frames: np.ndarray, skeleton: SkeletonDefinition):
    """Vectorised body heading (as angle) and pelvis frame for (T, J, 3) input."""
    _, po, _, _ = skeleton._pelvis_entries()
    pel, lh, rh, sp = po.joints
    lat = frames[:, rh] - frames[:, lh]
    ln = _norm(lat)
    if np.any(ln < EPS):
        raise DegeneratePoseError("left and right hips coincide", int(np.argmax(ln < EPS)))
    lat = lat / ln[:, None]
    horiz = np.hypot(lat[:, 0], lat[:, 2])
    if np.any(horiz < EPS):
        raise DegeneratePoseError("hip axis is vertical; heading undefined", int(np.argmax(horiz < EPS)))
    s = frames[:, sp] - frames[:, pel]
    up = s - np.sum(s * lat, axis=1, keepdims=True) * lat
    un = _norm(up)
    if np.any(un < EPS):
        raise DegeneratePoseError("spine is parallel to the hip axis", int(np.argmax(un < EPS)))
    up = up / un[:, None]
    fwd = np.cross(up, lat)
    pelvis = np.stack([fwd, up, lat], axis=-1)
    heading = np.arctan2(lat[:, 0], lat[:, 2])
    return heading, pelvis, horiz


def extract_ball_socket(v, diagnostics: list[str] | None = None):
    """Flexion and adduction of a limb direction expressed in its parent frame.

    ``flex = atan2(v_x, -v_y)``; adduction is the signed elevation of ``v``
    out of the sagittal (xy) plane. The latter is evaluated as
    ``atan2(v_z, |v_xy|)``, which equals ``sign(v_z) * arccos(v.v_xy / |v||v_xy|)``
    but keeps full precision near zero.
    """
    v = np.asarray(v, dtype=float)
    n = _norm(v)
    if np.any(n <= EPS):
        raise DegeneratePoseError("zero-length segment")
    flex = wrap_angle(np.arctan2(v[..., 0], -v[..., 1]))
    return flex, _elevation(v, diagnostics)


def extract_spinal(v, diagnostics: list[str] | None = None):
    """Extension and lateral bending of a spine segment (neutral = +y).

    Positive extension leans the segment toward local +x (forward).
    """
    v = np.asarray(v, dtype=float)
    if np.any(_norm(v) <= EPS):
        raise DegeneratePoseError("zero-length segment")
    ext = wrap_angle(np.arctan2(v[..., 0], v[..., 1]))
    return ext, _elevation(v, diagnostics)


def _elevation(v: np.ndarray, diagnostics: list[str] | None):
    xy = np.hypot(v[..., 0], v[..., 1])
    add = np.arctan2(v[..., 2], xy)
    pole = xy < EPS
    if np.any(pole):
        add = np.where(pole, np.sign(v[..., 2]) * (np.pi / 2), add)
        if diagnostics is not None:
            diagnostics.append("segment normal to the sagittal plane (adduction = +-pi/2)")
    return add


def extract_hinge(upper, lower):
    """Unsigned angle between two adjacent segments; 0 for a straight limb."""
    upper = np.asarray(upper, dtype=float)
    lower = np.asarray(lower, dtype=float)
    if np.any(_norm(upper) <= EPS) or np.any(_norm(lower) <= EPS):
        raise DegeneratePoseError("zero-length segment at hinge")
    cross = _norm(np.cross(upper, lower))
    dot = np.sum(upper * lower, axis=-1)
    return np.arctan2(cross, dot)


def extract_axial_rotation(
    parent_frame,
    child_pos,
    grandchild_pos,
    origin=None,
    *,
    reference=FORWARD,
    neutral=DOWN,
    diagnostics: list[str] | None = None,
):
    """Twist of the segment ``origin -> child_pos`` about its own axis.

    The reference direction is the parent's ``reference`` axis carried along
    by the swing that takes the neutral axis onto the segment; the result is
    the signed angle (right-handed about the segment) from that reference to
    the grandchild direction projected onto the plane normal to the segment.
    Returns 0 where the grandchild is collinear with the segment.
    """
    parent_frame = np.asarray(parent_frame, dtype=float)
    child_pos = np.asarray(child_pos, dtype=float)
    grandchild_pos = np.asarray(grandchild_pos, dtype=float)
    origin = np.zeros_like(child_pos) if origin is None else np.asarray(origin, dtype=float)
    seg = child_pos - origin
    sn = _norm(seg)
    if np.any(sn <= EPS):
        raise DegeneratePoseError("zero-length segment")
    u = seg / sn[..., None]
    local = _mtv(parent_frame, seg)
    if neutral[1] < 0:
        a1, a2 = extract_ball_socket(local)
    else:
        a1, a2 = extract_spinal(local)
    ref = _mv(parent_frame @ swing_matrix(a1, a2, neutral), np.asarray(reference, dtype=float))
    w = grandchild_pos - child_pos
    w = w - np.sum(w * u, axis=-1, keepdims=True) * u
    collinear = _norm(w) < EPS
    twist = np.arctan2(np.sum(u * np.cross(ref, w), axis=-1), np.sum(ref * w, axis=-1))
    if np.any(collinear):
        twist = np.where(collinear, 0.0, twist)
        if diagnostics is not None:
            diagnostics.append("grandchild collinear with segment (twist set to 0)")
    return wrap_angle(twist)


# ---------------------------------------------------------------------------
# whole-pose inverse kinematics


def _extract(frames: np.ndarray, skeleton: SkeletonDefinition):
    """Vectorised IK over (T, J, 3) frames -> ((T, 29) features, per-frame flags)."""
    T = frames.shape[0]
    if frames.shape[1] != skeleton.n_joints:
        raise DataError(f"motion has {frames.shape[1]} joints, skeleton has {skeleton.n_joints}")
    out = np.zeros((T, 29))
    flags: list[tuple[np.ndarray, str]] = []
    ko, po, kt, pt = skeleton._pelvis_entries()

    heading, pelvis, horiz = _heading_and_pelvis(frames, skeleton)
    body = rot_y(heading)
    q = np.einsum("tji,tjk->tik", body, pelvis)  # Rx(list) @ Rz(tilt)
    tilt = np.arctan2(-q[:, 0, 1], q[:, 0, 0])
    list_ = np.arctan2(-q[:, 1, 2], q[:, 2, 2])
    out[:, skeleton.slices[ko]] = np.stack([wrap_angle(tilt), list_, wrap_angle(heading)], axis=1)
    flags.append((horiz < 1e-3, "pelvis list near +-pi/2 (gimbal)"))
    out[:, skeleton.slices[kt]] = frames[:, pt.joints[0]]

    frames_g = np.empty((skeleton.n_joints, T, 3, 3))
    frames_g[0] = pelvis
    parents = skeleton.parent_index
    for j in skeleton.order[1:]:
        gp = frames_g[parents[j]]
        entry = skeleton._by_joint.get(j)
        if entry is None:
            frames_g[j] = gp
            continue
        k, fj = entry
        sl = skeleton.slices[k]
        c = fj.joints[1]
        if fj.kind == "hinge":
            upper = frames[:, j] - frames[:, parents[j]]
            lower = frames[:, c] - frames[:, j]
            try:
                bend = extract_hinge(upper, lower)
            except DegeneratePoseError as exc:
                bad = (_norm(upper) <= EPS) | (_norm(lower) <= EPS)
                raise DegeneratePoseError(f"{fj.name}: {exc}", int(np.argmax(bad))) from None
            value = bend - skeleton.hinge_rest_angle(fj)
            out[:, sl] = value[:, None]
            frames_g[j] = gp @ rot_z(fj.flex_sign * value)
            continue
        seg = frames[:, c] - frames[:, j]
        sn = _norm(seg)
        if np.any(sn <= EPS):
            raise DegeneratePoseError(f"{fj.name}: zero-length segment", int(np.argmax(sn <= EPS)))
        local = _mtv(gp, seg)
        neutral = fj.neutral
        if fj.kind == "ball_socket":
            a1, a2 = extract_ball_socket(local)
        else:
            a1, a2 = extract_spinal(local)
        xy = np.hypot(local[:, 0], local[:, 1])
        flags.append((xy < 1e-3 * sn, f"{fj.name} near gimbal (|adduction| ~ pi/2)"))
        rot = swing_matrix(a1, a2, neutral)
        cols = [a1, a2]
        if fj.dof == 3:
            g = fj.joints[2]
            twist = extract_axial_rotation(
                gp, frames[:, c], frames[:, g], frames[:, j],
                reference=np.asarray(fj.twist_reference), neutral=neutral,
            )
            w = frames[:, g] - frames[:, c]
            u = seg / sn[:, None]
            w = w - np.sum(w * u, axis=1, keepdims=True) * u
            flags.append((_norm(w) < EPS, f"{fj.name} twist undefined (grandchild collinear)"))
            cols.append(twist)
            rot = rot @ twist_matrix(twist, neutral)
        out[:, sl] = np.stack(cols, axis=1)
        frames_g[j] = gp @ rot

    if not np.all(np.isfinite(out)):
        bad = int(np.argmax(~np.all(np.isfinite(out), axis=1)))
        raise DegeneratePoseError("non-finite feature", bad)
    per_frame = [[] for _ in range(T)]
    for mask, msg in flags:
        for t in np.flatnonzero(mask):
            per_frame[t].append(msg)
    return out, per_frame


def extract_pose_features(frame: np.ndarray, skeleton: SkeletonDefinition) -> PoseFeatures:
    """29 joint-angle features of a single (J, 3) frame, in the skeleton's column order."""
    frame = np.asarray(frame, dtype=float)
    if frame.ndim != 2 or frame.shape[1] != 3:
        raise DataError(f"frame must have shape (J, 3), got {frame.shape}")
    if not np.all(np.isfinite(frame)):
        raise DataError("frame has non-finite coordinates")
    values, flags = _extract(frame[None], skeleton)
    return PoseFeatures(values=values[0], flags=flags[0])


def extract_sequence(motion: MotionSequence, skeleton: SkeletonDefinition) -> FeatureSequence:
    """Per-frame feature extraction; no temporal smoothing is applied."""
    values, per_frame = _extract(motion.frames, skeleton)
    flags = [f"frame {t}: {m}" for t, msgs in enumerate(per_frame) for m in msgs]
    return FeatureSequence(fps=motion.fps, rows=values, names=skeleton.feature_names, flags=flags)


# ---------------------------------------------------------------------------
# forward kinematics


def _validate_features(rows: np.ndarray, skeleton: SkeletonDefinition) -> None:
    if rows.ndim != 2 or rows.shape[1] != 29:
        raise DataError(f"features must have shape (T, 29), got {rows.shape}")
    if not np.all(np.isfinite(rows)):
        raise DataError("features contain non-finite values")
    half = np.pi / 2 + 1e-12
    for k, fj in enumerate(skeleton.feature_joints):
        block = rows[:, skeleton.slices[k]]
        if fj.kind == "pelvis_orientation" and np.any(np.abs(block[:, 1]) > half):
            raise DataError("pelvis list must lie in [-pi/2, pi/2]")
        if fj.kind in ("ball_socket", "spinal3", "spinal2") and np.any(np.abs(block[:, 1]) > half):
            raise DataError(f"{fj.name}: second swing angle must lie in [-pi/2, pi/2]")
        if fj.kind == "hinge":
            total = block[:, 0] + skeleton.hinge_rest_angle(fj)
            if np.any(total < -1e-12) or np.any(total > np.pi + 1e-12):
                raise DataError(f"{fj.name}: hinge angle outside [0, pi]")


def forward_kinematics(features: FeatureSequence, skeleton: SkeletonDefinition) -> MotionSequence:
    """World joint positions for a feature sequence.

    Joints that carry no feature are attached rigidly to their parent's
    segment using the skeleton's rest offsets.
    """
    issues = skeleton.fk_issues()
    if issues:
        raise DataError("skeleton unsuitable for forward kinematics: " + "; ".join(issues))
    rows = np.asarray(features.rows, dtype=float)
    _validate_features(rows, skeleton)
    T = rows.shape[0]
    ko, _, kt, _ = skeleton._pelvis_entries()
    tilt, list_, heading = rows[:, skeleton.slices[ko]].T

    frames_g = np.empty((skeleton.n_joints, T, 3, 3))
    pos = np.empty((T, skeleton.n_joints, 3))
    frames_g[0] = euler_zxy(tilt, list_, heading)
    pos[:, 0] = rows[:, skeleton.slices[kt]]
    offsets = skeleton.rest_offsets
    for j in skeleton.order[1:]:
        p = skeleton.parent_index[j]
        gp = frames_g[p]
        pos[:, j] = pos[:, p] + gp @ offsets[j]
        entry = skeleton._by_joint.get(j)
        if entry is None:
            frames_g[j] = gp
            continue
        k, fj = entry
        block = rows[:, skeleton.slices[k]]
        if fj.kind == "hinge":
            local = rot_z(fj.flex_sign * block[:, 0])
        else:
            local = swing_matrix(block[:, 0], block[:, 1], fj.neutral)
            if fj.dof == 3:
                local = local @ twist_matrix(block[:, 2], fj.neutral)
        frames_g[j] = gp @ local
    return MotionSequence(fps=features.fps, frames=pos)


# ---------------------------------------------------------------------------
# sampling


def sample_features(
    rng: np.random.Generator,
    n_frames: int,
    skeleton: SkeletonDefinition,
    translation_scale: float = 1.0,
) -> np.ndarray:
    """Random (T, 29) features inside the region where IK recovers FK exactly.

    Hinges stay bent by at least 0.2 rad so that parent twists are observable,
    and swing elevations stay away from the +-pi/2 poles.
    """
    rows = np.zeros((n_frames, 29))
    for k, fj in enumerate(skeleton.feature_joints):
        sl = skeleton.slices[k]
        if fj.kind == "pelvis_orientation":
            block = np.column_stack([
                rng.uniform(-1.0, 1.0, n_frames),
                rng.uniform(-1.0, 1.0, n_frames),
                rng.uniform(-np.pi, np.pi, n_frames),
            ])
        elif fj.kind == "pelvis_translation":
            block = rng.normal(0.0, translation_scale, (n_frames, 3))
        elif fj.kind == "ball_socket":
            block = np.column_stack([
                rng.uniform(-2.5, 2.5, n_frames),
                rng.uniform(-1.2, 1.2, n_frames),
                rng.uniform(-2.5, 2.5, n_frames),
            ])
        elif fj.kind == "hinge":
            block = (rng.uniform(0.2, 2.4, n_frames) - skeleton.hinge_rest_angle(fj))[:, None]
        elif fj.kind == "spinal3":
            block = np.column_stack([
                rng.uniform(-1.0, 1.0, n_frames),
                rng.uniform(-0.8, 0.8, n_frames),
                rng.uniform(-1.5, 1.5, n_frames),
            ])
        else:
            block = np.column_stack([
                rng.uniform(-0.8, 0.8, n_frames),
                rng.uniform(-0.6, 0.6, n_frames),
            ])
        rows[:, sl] = block
    return rows


# ---------------------------------------------------------------------------
# file formats


def load_motion(path: str | Path) -> MotionSequence:
    """Read a motion JSON file (keys: fps, joint_names, parents, frames)."""
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        return MotionSequence(fps=float(data["fps"]), frames=np.asarray(data["frames"], dtype=float))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, DataError):
            raise
        raise DataError(f"{path}: malformed motion file ({exc})") from exc


def motion_to_json(motion: MotionSequence, skeleton: SkeletonDefinition) -> str:
    frames = np.round(motion.frames, 9).tolist()
    return json.dumps(
        {
            "fps": motion.fps,
            "joint_names": list(skeleton.joint_names),
            "parents": list(skeleton.parent_index),
            "frames": frames,
        },
        separators=(",", ":"),
    )


def save_motion(path: str | Path, motion: MotionSequence, skeleton: SkeletonDefinition) -> None:
    write_atomic(path, motion_to_json(motion, skeleton))


def save_features_csv(path: str | Path, features: FeatureSequence) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(features.names)
    for row in features.rows:
        writer.writerow([repr(float(x)) for x in row])
    write_atomic(path, buf.getvalue())


def load_features_csv(path: str | Path, fps: float = 20.0) -> FeatureSequence:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            names = tuple(next(reader))
        except StopIteration:
            raise FormatError(f"{path}: empty feature file") from None
        rows = [[float(x) for x in r] for r in reader if r]
    if not rows or any(len(r) != len(names) for r in rows):
        raise FormatError(f"{path}: ragged or empty feature rows")
    return FeatureSequence(fps=fps, rows=np.array(rows), names=names)


def features_to_bytes(features: FeatureSequence) -> bytes:
    rows = np.ascontiguousarray(features.rows, dtype="<f4")
    return LIFE_MAGIC + struct.pack("<I", rows.shape[0]) + rows.tobytes()


def features_from_bytes(buf: bytes, fps: float = 20.0, names: tuple[str, ...] = ()) -> FeatureSequence:
    check_magic(buf, LIFE_MAGIC, "feature file")
    (n,) = unpack_from("<I", buf, 4, "feature file")
    expected = 8 + n * 29 * 4
    if len(buf) != expected:
        raise FormatError(f"feature file: expected {expected} bytes, got {len(buf)}")
    rows = np.frombuffer(buf, dtype="<f4", offset=8).reshape(n, 29).astype(float)
    return FeatureSequence(fps=fps, rows=rows, names=names)


def save_features_bin(path: str | Path, features: FeatureSequence) -> None:
    with atomic_open(path, "wb") as fh:
        fh.write(features_to_bytes(features))


def load_features_bin(path: str | Path, fps: float = 20.0) -> FeatureSequence:
    return features_from_bytes(Path(path).read_bytes(), fps=fps)
