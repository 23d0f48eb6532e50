"""Synthetic paired corpus: FK-generated motions with templated captions.

Every item oscillates one angular degree of freedom of one feature joint (or
of a few joints) with raised-cosine cycles at a slow or quick tempo. The
caption names the joint, the movement and the tempo, so the label is
recoverable from the motion by construction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .kinematics import FeatureSequence, MotionSequence, SkeletonDefinition, forward_kinematics

FPS = 20.0


@dataclass(frozen=True)
class Action:
    joint: str  # feature joint name
    column: int  # degree of freedom within the joint's block
    verb: str
    noun: str  # joint noun phrase used in captions and queries
    tail: str  # words after the noun phrase
    amplitude: float  # peak angle in radians


# axial twists are left out: they are poorly observable while the limb below
# is nearly straight, which the standing base pose keeps it
ACTIONS: dict[str, Action] = {
    a.joint + "/" + str(a.column): a
    for a in (
        Action("pelvis_orientation", 0, "tilts", "the pelvis", "", 0.4),
        Action("pelvis_orientation", 1, "rocks", "the pelvis", "sideways", 0.3),
        Action("hip_l", 0, "raises", "the left hip", "", 0.9),
        Action("hip_l", 1, "swings", "the left hip", "sideways", 0.5),
        Action("hip_r", 0, "raises", "the right hip", "", 0.9),
        Action("hip_r", 1, "swings", "the right hip", "sideways", 0.5),
        Action("knee_l", 0, "bends", "the left knee", "", 1.2),
        Action("knee_r", 0, "bends", "the right knee", "", 1.2),
        Action("ankle_l", 0, "flexes", "the left ankle", "", 0.6),
        Action("ankle_r", 0, "flexes", "the right ankle", "", 0.6),
        Action("lumbar", 0, "bends", "the torso", "", 0.5),
        Action("lumbar", 1, "leans", "the torso", "sideways", 0.4),
        Action("shoulder_l", 0, "raises", "the left shoulder", "", 1.2),
        Action("shoulder_l", 1, "swings", "the left shoulder", "sideways", 0.8),
        Action("shoulder_r", 0, "raises", "the right shoulder", "", 1.2),
        Action("shoulder_r", 1, "swings", "the right shoulder", "sideways", 0.8),
        Action("elbow_l", 0, "bends", "the left elbow", "", 1.2),
        Action("elbow_r", 0, "bends", "the right elbow", "", 1.2),
        Action("neck", 0, "nods", "the neck", "", 0.5),
        Action("neck", 1, "tilts", "the neck", "sideways", 0.4),
    )
}
SPEEDS = {"slowly": 40, "quickly": 12}  # oscillation period in frames
DRIFT_SPEED = 0.0  # std of an optional slow horizontal pelvis drift, m/s; off keeps items single-joint


@dataclass
class SyntheticItem:
    id: str
    split: str
    actions: tuple[str, ...]  # keys into ACTIONS
    speed: str
    amplitude: float
    text: str
    features: np.ndarray  # generator features (T, 29)
    motion: MotionSequence | None = None

    @property
    def label(self) -> str:
        return self.text

    @property
    def joints(self) -> tuple[str, ...]:
        """Animated feature joints, in action order."""
        return tuple(ACTIONS[a].joint for a in self.actions)


@dataclass
class SyntheticDataset:
    items: list[SyntheticItem]
    seed: int
    skeleton: SkeletonDefinition = field(repr=False, default_factory=SkeletonDefinition.default)

    def split(self, name: str) -> list[SyntheticItem]:
        return [it for it in self.items if it.split == name]

    def manifest(self) -> list[dict]:
        return [
            {
                "id": it.id,
                "split": it.split,
                "motion": f"motions/{it.id}.json",
                "text": it.text,
                "joints": list(it.joints),
                "actions": list(it.actions),
                "speed": it.speed,
                "amplitude": round(it.amplitude, 6),
                "n_frames": int(it.features.shape[0]),
            }
            for it in self.items
        ]


def caption(actions: tuple[str, ...], speed: str) -> str:
    """Tempo goes last so the +-1 context window pairs it with the movement phrase."""
    parts = []
    for key in actions:
        a = ACTIONS[key]
        parts.append(" ".join(w for w in (a.verb, a.noun, a.tail) if w))
    return "a person " + " and ".join(parts) + f" {speed}"


def activation(n_frames: int, period: int) -> np.ndarray:
    """Whole raised-cosine cycles from the first frame, rest afterwards."""
    cycles = max(1, n_frames // period)
    length = min(cycles * period, n_frames)
    t = np.arange(length)
    out = np.zeros(n_frames)
    out[:length] = 0.5 * (1.0 - np.cos(2.0 * np.pi * t / period))
    return out


def _base_pose(
    rng: np.random.Generator, n_frames: int, skeleton: SkeletonDefinition, canonical: bool = True
) -> np.ndarray:
    """Static, slightly perturbed standing pose (plus drift when ``DRIFT_SPEED`` > 0).

    Canonical clips start at the origin facing +x, the usual normalisation of
    text-motion corpora; otherwise heading and start position are random.
    """
    rows = np.zeros((n_frames, 29))
    for k, fj in enumerate(skeleton.feature_joints):
        sl = skeleton.slices[k]
        if fj.kind == "pelvis_orientation":
            heading = 0.0 if canonical else rng.uniform(-np.pi, np.pi)
            rows[:, sl] = [rng.normal(0, 0.03), rng.normal(0, 0.03), heading]
        elif fj.kind == "pelvis_translation":
            start = np.array([0.0, 0.93, 0.0]) if canonical else np.array([rng.uniform(-2, 2), 0.93, rng.uniform(-2, 2)])
            drift = np.array([rng.normal(0, 1), 0.0, rng.normal(0, 1)]) * DRIFT_SPEED / FPS
            rows[:, sl] = start + np.arange(n_frames)[:, None] * drift
        elif fj.kind == "hinge":
            rows[:, sl] = rng.uniform(0.0, 0.1)
        elif fj.kind == "ball_socket":
            rows[:, sl] = [rng.normal(0, 0.05), rng.normal(0, 0.05), 0.0]
        elif fj.kind == "spinal3":
            rows[:, sl] = [rng.normal(0, 0.03), rng.normal(0, 0.03), 0.0]
        else:
            rows[:, sl] = [rng.normal(0, 0.03), rng.normal(0, 0.03)]
    return rows


def generate_item(
    rng: np.random.Generator,
    item_id: str,
    split: str,
    skeleton: SkeletonDefinition,
    joints_per_item: int = 1,
    action_pool: tuple[str, ...] | None = None,
    canonical: bool = True,
) -> SyntheticItem:
    """One paired item; multi-joint items draw actions on distinct joints."""
    pool = list(action_pool or ACTIONS)
    names = {fj.name: k for k, fj in enumerate(skeleton.feature_joints)}
    chosen: list[str] = []
    while len(chosen) < joints_per_item:
        free = [a for a in pool if ACTIONS[a].joint not in {ACTIONS[c].joint for c in chosen}]
        if not free:
            raise ValueError("not enough distinct joints in the action pool")
        chosen.append(str(free[int(rng.integers(len(free)))]))
    speed = str(rng.choice(list(SPEEDS)))
    n_frames = int(rng.integers(160, 225))
    scale = float(rng.uniform(0.8, 1.2))
    rows = _base_pose(rng, n_frames, skeleton, canonical)
    act = activation(n_frames, SPEEDS[speed])
    for key in chosen:
        a = ACTIONS[key]
        rows[:, skeleton.slices[names[a.joint]].start + a.column] += scale * a.amplitude * act
    return SyntheticItem(
        id=item_id,
        split=split,
        actions=tuple(chosen),
        speed=speed,
        amplitude=scale,
        text=caption(tuple(chosen), speed),
        features=rows,
    )


def generate_dataset(
    n_train: int = 200,
    n_val: int = 50,
    n_test: int = 50,
    seed: int = 0,
    joints_per_item: int = 1,
    skeleton: SkeletonDefinition | None = None,
    with_motion: bool = True,
    canonical: bool = True,
) -> SyntheticDataset:
    """Deterministic corpus; ``with_motion`` also runs forward kinematics per item."""
    skeleton = skeleton or SkeletonDefinition.default()
    rng = np.random.default_rng(seed)
    items = []
    for split, n in (("train", n_train), ("val", n_val), ("test", n_test)):
        for i in range(n):
            item = generate_item(rng, f"{split}_{i:05d}", split, skeleton, joints_per_item, canonical=canonical)
            if with_motion:
                item.motion = forward_kinematics(FeatureSequence(FPS, item.features), skeleton)
            items.append(item)
    return SyntheticDataset(items=items, seed=seed, skeleton=skeleton)


def write_dataset(ds: SyntheticDataset, out: str | Path) -> Path:
    """Motion JSON files under ``out/motions`` plus ``out/manifest.json``."""
    from ._io import write_atomic
    from .kinematics import motion_to_json

    out = Path(out)
    for it in ds.items:
        if it.motion is None:
            it.motion = forward_kinematics(FeatureSequence(FPS, it.features), ds.skeleton)
        write_atomic(out / "motions" / f"{it.id}.json", motion_to_json(it.motion, ds.skeleton))
    manifest = {"seed": ds.seed, "fps": FPS, "items": ds.manifest()}
    path = out / "manifest.json"
    write_atomic(path, json.dumps(manifest, indent=1))
    return path
