"""Hand kinematics: tree model with a floating base, FK, Jacobians, DLS IK.

Configuration layout: q = [base translation (3), base rotation vector (3),
one value per non-fixed joint in file order]. Joint origins follow the
usual convention: child frame = parent frame * origin * motion(q), with the
joint axis expressed in the child frame.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import transforms as tf
from .errors import ParseError

REVOLUTE = "revolute"
PRISMATIC = "prismatic"
FIXED = "fixed"


@dataclass
class Joint:
    name: str
    kind: str
    parent: str
    child: str
    origin: np.ndarray  # 4x4
    axis: np.ndarray  # unit, in the child frame
    limits: tuple[float, float]


@dataclass
class Attachment:
    link: str
    offset: np.ndarray


@dataclass
class CollisionSphere:
    link: str
    center: np.ndarray
    radius: float


@dataclass
class JointConfig:
    """Floating-base pose plus actuated joint values."""

    base_pose: np.ndarray  # [tx, ty, tz, rx, ry, rz]
    joint_values: np.ndarray

    def __post_init__(self):
        self.base_pose = np.asarray(self.base_pose, dtype=float).copy()
        self.joint_values = np.asarray(self.joint_values, dtype=float).copy()
        self.base_pose[3:] = tf.canonicalize_rotvec(self.base_pose[3:])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.base_pose, self.joint_values])

    @staticmethod
    def from_vector(vec: np.ndarray) -> "JointConfig":
        vec = np.asarray(vec, dtype=float)
        return JointConfig(vec[:6], vec[6:])

    def copy(self) -> "JointConfig":
        return JointConfig(self.base_pose, self.joint_values)


class HandModel:
    """Immutable kinematic description of a hand; shareable across threads."""

    def __init__(self, name, links, joints, fingertips, collision_spheres, rest_pose,
                 palm_axis=(0.0, 0.0, 1.0), palm_center=(0.0, 0.0, 0.0), metadata=None):
        self.name = name
        self.links = list(links)
        self.joints = list(joints)
        self.fingertips = list(fingertips)
        self.collision_spheres = list(collision_spheres)
        self.rest_pose = rest_pose
        self.palm_axis = np.asarray(palm_axis, dtype=float)
        self.palm_center = np.asarray(palm_center, dtype=float)
        self.metadata = metadata or {}
        self._validate()
        self.actuated = [j for j in self.joints if j.kind != FIXED]
        self.dof = 6 + len(self.actuated)
        self._joint_index = {j.name: i for i, j in enumerate(self.actuated)}
        self._parent_joint = {j.child: j for j in self.joints}
        self._sphere_adjacency = self._build_sphere_adjacency()

    # -- construction helpers -------------------------------------------

    def _validate(self):
        known = set(self.links)
        children = set()
        for j in self.joints:
            if j.parent not in known or j.child not in known:
                raise ValueError(f"joint {j.name} references unknown link")
            if j.child in children:
                raise ValueError(f"link {j.child} has two parent joints")
            children.add(j.child)
            if j.limits[0] > j.limits[1]:
                raise ValueError(f"joint {j.name} limits reversed")
        roots = [l for l in self.links if l not in children]
        if len(roots) != 1:
            raise ValueError(f"joint graph must be a tree with one root, found roots {roots}")
        self.base_link = roots[0]
        for tip in self.fingertips:
            if tip.link not in known:
                raise ValueError(f"fingertip references unknown link {tip.link}")
        for sph in self.collision_spheres:
            if sph.link not in known:
                raise ValueError(f"collision sphere references unknown link {sph.link}")
            if sph.radius <= 0:
                raise ValueError("collision sphere radius must be positive")

    def _build_sphere_adjacency(self):
        """Sphere pairs on the same link or on joint-connected links are adjacent."""
        linked = set()
        for j in self.joints:
            linked.add((j.parent, j.child))
            linked.add((j.child, j.parent))
        adjacent = set()
        spheres = self.collision_spheres
        for i in range(len(spheres)):
            for j in range(i + 1, len(spheres)):
                a, b = spheres[i].link, spheres[j].link
                if a == b or (a, b) in linked:
                    adjacent.add((i, j))
        return adjacent

    # -- queries ----------------------------------------------------------

    @property
    def num_fingertips(self) -> int:
        return len(self.fingertips)

    def joint_limits_vector(self):
        lo = np.array([j.limits[0] for j in self.actuated])
        hi = np.array([j.limits[1] for j in self.actuated])
        return lo, hi

    def clamp(self, q: JointConfig) -> JointConfig:
        lo, hi = self.joint_limits_vector()
        return JointConfig(q.base_pose, np.clip(q.joint_values, lo, hi))

    def nonadjacent_sphere_pairs(self):
        n = len(self.collision_spheres)
        return [(i, j) for i in range(n) for j in range(i + 1, n)
                if (i, j) not in self._sphere_adjacency]

    def chain_to(self, link: str):
        """Actuated joint indices on the path base -> link, in tree order."""
        chain = []
        current = link
        while current != self.base_link:
            joint = self._parent_joint[current]
            if joint.kind != FIXED:
                chain.append(self._joint_index[joint.name])
            current = joint.parent
        return chain[::-1]

    def finger_chain(self, finger_index: int):
        return self.chain_to(self.fingertips[finger_index].link)

    # -- kinematics -------------------------------------------------------

    def forward_kinematics(self, q: JointConfig) -> dict[str, np.ndarray]:
        if len(q.joint_values) != len(self.actuated):
            raise ValueError(
                f"expected {len(self.actuated)} joint values, got {len(q.joint_values)}")
        poses = {self.base_link: tf.make_transform(q.base_pose[3:], q.base_pose[:3])}
        for joint in self.joints:  # file order is topological by construction
            parent_T = poses[joint.parent]
            T = parent_T @ joint.origin
            if joint.kind == REVOLUTE:
                value = q.joint_values[self._joint_index[joint.name]]
                T = T @ tf.make_transform(joint.axis * value, (0.0, 0.0, 0.0))
            elif joint.kind == PRISMATIC:
                value = q.joint_values[self._joint_index[joint.name]]
                T = T @ tf.make_transform((0.0, 0.0, 0.0), joint.axis * value)
            poses[joint.child] = T
        return poses

    def fingertip_positions(self, q: JointConfig, poses=None) -> np.ndarray:
        poses = poses or self.forward_kinematics(q)
        return np.array([tf.transform_point(poses[t.link], t.offset) for t in self.fingertips])

    def sphere_centers(self, q: JointConfig, poses=None) -> np.ndarray:
        poses = poses or self.forward_kinematics(q)
        return np.array([tf.transform_point(poses[s.link], s.center)
                         for s in self.collision_spheres])

    def sphere_radii(self) -> np.ndarray:
        return np.array([s.radius for s in self.collision_spheres])

    def point_jacobian(self, q: JointConfig, link: str, offset, poses=None) -> np.ndarray:
        """3 x dof Jacobian of the world position of a point attached to a link.

        Columns: base translation (identity), base rotation (rotation-vector
        chart via the right Jacobian), then one column per actuated joint on
        the support chain (zero elsewhere).
        """
        poses = poses or self.forward_kinematics(q)
        p = tf.transform_point(poses[link], offset)
        J = np.zeros((3, self.dof))
        J[:, 0:3] = np.eye(3)
        rv = q.base_pose[3:]
        R = tf.rotvec_to_matrix(rv)
        v = R.T @ (p - q.base_pose[:3])  # point in the base frame
        J[:, 3:6] = -R @ tf.skew(v) @ tf.rotation_right_jacobian(rv)
        current = link
        while current != self.base_link:
            joint = self._parent_joint[current]
            if joint.kind != FIXED:
                col = 6 + self._joint_index[joint.name]
                frame = poses[joint.child]
                axis_world = frame[:3, :3] @ joint.axis
                if joint.kind == REVOLUTE:
                    origin_world = frame[:3, 3]
                    J[:, col] = np.cross(axis_world, p - origin_world)
                else:
                    J[:, col] = axis_world
            current = joint.parent
        return J

    def fingertip_jacobian(self, q: JointConfig, finger_index: int, poses=None) -> np.ndarray:
        tip = self.fingertips[finger_index]
        return self.point_jacobian(q, tip.link, tip.offset, poses)

    def sphere_jacobian(self, q: JointConfig, sphere_index: int, poses=None) -> np.ndarray:
        sph = self.collision_spheres[sphere_index]
        return self.point_jacobian(q, sph.link, sph.center, poses)


@dataclass
class IKParams:
    damping: float = 0.05
    max_iter: int = 100
    tol: float = 1e-4


def ik_damped_least_squares(hand: HandModel, q: JointConfig, finger_index: int,
                            target, params: IKParams | None = None):
    """Damped least squares IK on one finger's chain; the base stays frozen.

    Returns (config, residual): the full configuration with only that
    finger's joints updated, and the final position error norm. Best-effort;
    never raises on unreachable targets.
    """
    params = params or IKParams()
    target = np.asarray(target, dtype=float)
    chain = hand.finger_chain(finger_index)
    lo, hi = hand.joint_limits_vector()
    q = q.copy()
    lam2 = params.damping ** 2
    poses = hand.forward_kinematics(q)
    p = hand.fingertip_positions(q, poses)[finger_index]
    err = target - p
    residual = float(np.linalg.norm(err))
    for _ in range(params.max_iter):
        if residual < params.tol:
            break
        J = hand.fingertip_jacobian(q, finger_index, poses)[:, [6 + c for c in chain]]
        JJt = J @ J.T + lam2 * np.eye(3)
        dq = J.T @ np.linalg.solve(JJt, err)
        values = q.joint_values.copy()
        values[chain] = np.clip(values[chain] + dq, lo[chain], hi[chain])
        q = JointConfig(q.base_pose, values)
        poses = hand.forward_kinematics(q)
        p = hand.fingertip_positions(q, poses)[finger_index]
        err = target - p
        residual = float(np.linalg.norm(err))
    return q, residual


# -- hand description files ----------------------------------------------


def _joint_from_dict(d) -> Joint:
    origin = d.get("origin", [0, 0, 0, 0, 0, 0])
    return Joint(
        name=d["name"],
        kind=d["type"],
        parent=d["parent"],
        child=d["child"],
        origin=tf.make_transform(origin[3:], origin[:3]),
        axis=np.asarray(d.get("axis", [0, 0, 1]), dtype=float),
        limits=tuple(d.get("limits", [0.0, 0.0])),
    )


def hand_from_dict(data: dict) -> HandModel:
    joints = [_joint_from_dict(j) for j in data.get("joints", [])]
    for j in joints:
        if j.kind not in (REVOLUTE, PRISMATIC, FIXED):
            raise ValueError(f"joint {j.name} has unknown type {j.kind!r}")
        if j.kind != FIXED:
            n = np.linalg.norm(j.axis)
            if n < 1e-12:
                raise ValueError(f"joint {j.name} has a zero axis")
            j.axis = j.axis / n
    fingertips = [Attachment(t["link"], np.asarray(t["offset"], dtype=float))
                  for t in data.get("fingertips", [])]
    spheres = [CollisionSphere(s["link"], np.asarray(s["center"], dtype=float), float(s["radius"]))
               for s in data.get("collision_spheres", [])]
    rest = data.get("rest_pose", {})
    rest_pose = JointConfig(
        np.asarray(rest.get("base_pose", [0.0] * 6), dtype=float),
        np.asarray(rest.get("joint_values", []), dtype=float),
    )
    hand = HandModel(
        name=data.get("name", "hand"),
        links=data["links"],
        joints=joints,
        fingertips=fingertips,
        collision_spheres=spheres,
        rest_pose=rest_pose,
        palm_axis=data.get("palm_axis", [0.0, 0.0, 1.0]),
        palm_center=data.get("palm_center", [0.0, 0.0, 0.0]),
        metadata=data.get("metadata"),
    )
    if len(rest_pose.joint_values) != len(hand.actuated):
        raise ValueError("rest_pose joint_values length does not match actuated joints")
    return hand


BUILTIN_HANDS = ("parallel_jaw", "three_finger", "four_finger")


def load_hand(spec) -> HandModel:
    """Load a hand by builtin name or from a JSON file path."""
    name = str(spec)
    if name in BUILTIN_HANDS:
        text = resources.files("graspsynth.hands").joinpath(f"{name}.json").read_text()
    else:
        path = Path(name)
        if not path.exists():
            raise ParseError(f"hand {name!r} is neither a builtin {BUILTIN_HANDS} nor a file",
                             path=name)
        text = path.read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", path=name, line=exc.lineno) from exc
    try:
        return hand_from_dict(data)
    except (KeyError, ValueError, TypeError) as exc:
        raise ParseError(f"bad hand description: {exc}", path=name) from exc
