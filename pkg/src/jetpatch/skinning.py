"""Linear blend skinning over a capsule-friendly skeleton.

Rest transforms are stored in world space, so the identity pose reproduces
them exactly. Posing applies per-joint local rotations down the hierarchy and
a root translation; points are skinned with the delta transforms
A_j = world_j @ inv(rest_world_j).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .rotations import IDENTITY_QUAT, quat_to_mat

MAX_INFLUENCES = 4
WEIGHT_SUM_TOL = 1e-9


class SkinningError(ValueError):
    """Invalid skeleton topology, pose, or weight table."""


@dataclass(frozen=True)
class Joint:
    parent: int              # -1 for the root
    rest_world: np.ndarray   # (4, 4) world transform in the rest pose

    def __post_init__(self):
        M = np.asarray(self.rest_world, dtype=float)
        if M.shape != (4, 4):
            raise SkinningError("rest transform must be 4x4")
        object.__setattr__(self, "rest_world", M)


@dataclass
class Pose:
    quats: np.ndarray                 # (J, 4) unit quaternions (w, x, y, z)
    root_translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    root_velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))  # m/s

    def __post_init__(self):
        q = np.atleast_2d(np.asarray(self.quats, dtype=float))
        norms = np.linalg.norm(q, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise SkinningError("pose quaternions must be unit norm")
        self.quats = q
        self.root_translation = np.asarray(self.root_translation, dtype=float).reshape(3)
        self.root_velocity = np.asarray(self.root_velocity, dtype=float).reshape(3)


@dataclass
class Skeleton:
    joints: list[Joint]
    pose: Pose | None = None

    def __post_init__(self):
        for i, j in enumerate(self.joints):
            if j.parent >= i:
                raise SkinningError(f"joint {i} has parent {j.parent}; joints must "
                                    f"be topologically sorted (parent < index)")
        if self.pose is None:
            self.pose = identity_pose(len(self.joints))
        elif len(self.pose.quats) != len(self.joints):
            raise SkinningError("pose quaternion count does not match joint count")

    @property
    def num_joints(self) -> int:
        return len(self.joints)

    def with_pose(self, pose: Pose) -> "Skeleton":
        return Skeleton(self.joints, pose)

    def to_json(self) -> dict:
        return {"joints": [{"parent": j.parent, "rest": j.rest_world.ravel().tolist()}
                           for j in self.joints]}

    @classmethod
    def from_json(cls, obj: dict) -> "Skeleton":
        joints = [Joint(int(j["parent"]), np.asarray(j["rest"], dtype=float).reshape(4, 4))
                  for j in obj["joints"]]
        return cls(joints)


def identity_pose(num_joints: int) -> Pose:
    return Pose(np.tile(IDENTITY_QUAT, (num_joints, 1)))


def pose_to_json(pose: Pose) -> dict:
    return {"quats": pose.quats.tolist(),
            "root_translation": pose.root_translation.tolist(),
            "root_velocity": pose.root_velocity.tolist()}


def pose_from_json(obj: dict) -> Pose:
    return Pose(np.asarray(obj["quats"], dtype=float),
                np.asarray(obj.get("root_translation", [0, 0, 0]), dtype=float),
                np.asarray(obj.get("root_velocity", [0, 0, 0]), dtype=float))


def _rot4(R: np.ndarray) -> np.ndarray:
    M = np.eye(4)
    M[:3, :3] = R
    return M


def _trans4(t: np.ndarray) -> np.ndarray:
    M = np.eye(4)
    M[:3, 3] = t
    return M


def pose_joints(skeleton: Skeleton) -> np.ndarray:
    """World transform (4x4) per joint under the skeleton's pose.

    world_j = world_parent @ rel_j @ rot(q_j), with rel_j the rest-relative
    transform; the root additionally receives the pose's translation.
    """
    pose = skeleton.pose
    world = np.empty((skeleton.num_joints, 4, 4))
    for i, joint in enumerate(skeleton.joints):
        local_rot = _rot4(quat_to_mat(pose.quats[i]))
        if joint.parent < 0:
            world[i] = _trans4(pose.root_translation) @ joint.rest_world @ local_rot
        else:
            parent = skeleton.joints[joint.parent]
            rel = np.linalg.inv(parent.rest_world) @ joint.rest_world
            world[i] = world[joint.parent] @ rel @ local_rot
    return world


def joint_deltas(skeleton: Skeleton) -> np.ndarray:
    """Per-joint delta transforms A_j = world_j @ inv(rest_world_j)."""
    world = pose_joints(skeleton)
    deltas = np.empty_like(world)
    for i, joint in enumerate(skeleton.joints):
        deltas[i] = world[i] @ np.linalg.inv(joint.rest_world)
    return deltas


@dataclass(frozen=True)
class SkinWeights:
    """Sparse per-point joint influences: at most 4 per point, summing to 1."""

    indices: np.ndarray  # (N, K) joint ids, K <= 4 (padded entries carry weight 0)
    weights: np.ndarray  # (N, K) nonnegative, rows sum to 1

    def __post_init__(self):
        idx = np.atleast_2d(np.asarray(self.indices, dtype=np.int64))
        w = np.atleast_2d(np.asarray(self.weights, dtype=float))
        if idx.shape != w.shape:
            raise SkinningError("weight and index tables must have the same shape")
        if idx.shape[1] > MAX_INFLUENCES:
            raise SkinningError(f"at most {MAX_INFLUENCES} joints per point")
        if np.any(w < -WEIGHT_SUM_TOL):
            raise SkinningError("weights must be nonnegative")
        sums = w.sum(axis=1)
        if np.any(np.abs(sums - 1.0) > WEIGHT_SUM_TOL):
            raise SkinningError("per-point weights must sum to 1")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "weights", w)

    def __len__(self) -> int:
        return len(self.indices)

    def to_json(self) -> dict:
        return {"indices": self.indices.tolist(), "weights": self.weights.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "SkinWeights":
        return cls(np.asarray(obj["indices"], dtype=np.int64),
                   np.asarray(obj["weights"], dtype=float))


def rigid_weights(num_points: int, joint: int = 0) -> SkinWeights:
    """Every point bound rigidly to one joint."""
    return SkinWeights(np.full((num_points, 1), joint, dtype=np.int64),
                       np.ones((num_points, 1)))


def skin_points(points: np.ndarray, weights: SkinWeights,
                skeleton: Skeleton) -> tuple[np.ndarray, np.ndarray]:
    """Pose points by LBS: x' = sum_i w_i (A_i x + b_i).

    Returns (posed (N, 3), J_psi (N, 3, 3)) where J_psi = sum_i w_i A_i with
    the weights treated as locally constant.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if len(pts) != len(weights):
        raise SkinningError(f"point count {len(pts)} does not match weight "
                            f"row count {len(weights)}")
    deltas = joint_deltas(skeleton)
    A = deltas[weights.indices]            # (N, K, 4, 4)
    w = weights.weights[..., None, None]   # (N, K, 1, 1)
    blended = (w * A).sum(axis=1)          # (N, 4, 4)
    posed = np.einsum("nab,nb->na", blended[:, :3, :3], pts) + blended[:, :3, 3]
    return posed, blended[:, :3, :3]
