"""Hierarchical sampling of ground-truth contact/force training examples.

Palm poses are sampled facing the object; per-finger IK lands fingertips on
nearby surface points; per-finger solutions are combined; contact forces
are drawn inside each friction cone; the summed wrench, heatmap, force map,
and region mask are written out as one example directory.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ParseError
from .geometry import OrientedPointCloud
from .kinematics import HandModel, IKParams, JointConfig, ik_damped_least_squares
from .proposal import (contact_heatmap_from_pose, load_mask, load_score_map,
                       save_mask, save_score_map)
from .transforms import (make_transform, matrix_to_rotvec, rotation_between,
                         rotvec_to_matrix)
from .wrench import grasp_map

STANDOFF_RANGE = (0.05, 0.15)  # m from the surface along the outward normal
IK_RESIDUAL_TOL = 0.005  # m, per-finger surface attachment tolerance
MAX_COMBOS_PER_POSE = 81
FINGER_REACH_FACTOR = 1.2
CANDIDATE_POINTS_PER_FINGER = 3
FORCE_MAGNITUDE_RANGE = (0.1, 1.0)
MASK_ALL_ONES_PROB = 0.5
MASK_VICINITY_RADIUS = 0.05  # m
WRENCH_RECOMPUTE_TOL = 1e-9


def sample_palm_poses(cloud: OrientedPointCloud, count: int, seed: int,
                      standoff_range=STANDOFF_RANGE) -> list[np.ndarray]:
    """Palm frames (4x4) facing randomly chosen surface points.

    The palm z-axis points at the chosen surface point from a standoff
    along its outward normal; roll about the approach axis is uniform.
    """
    if count < 1:
        raise ValueError("count must be at least 1")
    rng = np.random.default_rng(seed)
    poses = []
    for _ in range(count):
        idx = int(rng.integers(len(cloud)))
        standoff = float(rng.uniform(*standoff_range))
        roll = float(rng.uniform(0.0, 2.0 * np.pi))
        anchor = cloud.points[idx]
        normal = cloud.normals[idx]
        position = anchor + standoff * normal
        approach = -normal  # z-axis looks at the anchor point
        R = rotation_between(np.array([0.0, 0.0, 1.0]), approach)
        R = R @ rotvec_to_matrix(np.array([0.0, 0.0, roll]))
        T = np.eye(4)
        T[:3, :3] = R
        T[:3, 3] = position
        poses.append(T)
    return poses


def _finger_root_world(hand: HandModel, q: JointConfig, finger: int) -> np.ndarray:
    chain = hand.finger_chain(finger)
    poses = hand.forward_kinematics(q)
    if not chain:
        return poses[hand.base_link][:3, 3]
    first_joint = hand.actuated[chain[0]]
    return poses[first_joint.child][:3, 3]


def sample_grasp_candidates(hand: HandModel, cloud: OrientedPointCloud,
                            palm_pose: np.ndarray, seed: int,
                            max_combos: int = MAX_COMBOS_PER_POSE) -> list[JointConfig]:
    """IK each finger onto up to 3 nearby surface points; combine solutions.

    A per-finger solution is kept when the fingertip lands within 5 mm of
    its target surface point; the Cartesian product across fingers is
    emitted, capped per palm pose. Fingers with no reachable point yield an
    empty candidate list.
    """
    base_pose = np.concatenate([palm_pose[:3, 3], matrix_to_rotvec(palm_pose[:3, :3])])
    q0 = JointConfig(base_pose, hand.rest_pose.joint_values)
    tips_rest = hand.fingertip_positions(q0)
    per_finger: list[list[np.ndarray]] = []
    for finger in range(hand.num_fingertips):
        root = _finger_root_world(hand, q0, finger)
        reach = np.linalg.norm(tips_rest[finger] - root) * FINGER_REACH_FACTOR
        order = np.argsort(np.sum((cloud.points - tips_rest[finger]) ** 2, axis=1))
        solutions = []
        for idx in order:
            if len(solutions) == CANDIDATE_POINTS_PER_FINGER:
                break
            point = cloud.points[idx]
            if np.linalg.norm(point - root) > reach:
                continue
            solved, residual = ik_damped_least_squares(hand, q0, finger, point, IKParams())
            if residual < IK_RESIDUAL_TOL:
                solutions.append(solved.joint_values[hand.finger_chain(finger)])
        if not solutions:
            return []
        per_finger.append(solutions)
    combos: list[JointConfig] = []
    counts = [len(s) for s in per_finger]
    total = int(np.prod(counts))
    for flat in range(min(total, max_combos)):
        values = hand.rest_pose.joint_values.copy()
        rem = flat
        for finger in range(hand.num_fingertips):
            pick = rem % counts[finger]
            rem //= counts[finger]
            values[hand.finger_chain(finger)] = per_finger[finger][pick]
        combos.append(JointConfig(base_pose, values))
    return combos


def sample_contact_forces(maps, mu: float, seed: int,
                          magnitude_range=FORCE_MAGNITUDE_RANGE):
    """Random in-cone force per contact plus the summed object wrench."""
    if len(maps) < 1:
        raise ValueError("need at least one contact")
    rng = np.random.default_rng(seed)
    forces = np.empty((len(maps), 3))
    wrench = np.zeros(6)
    for i, g in enumerate(maps):
        magnitude = float(rng.uniform(*magnitude_range))
        ratio = float(rng.uniform(0.0, mu))
        angle = float(rng.uniform(0.0, 2.0 * np.pi))
        forces[i] = g.cone.sample(magnitude, ratio, angle)
        wrench += g.wrench_of(forces[i])
    return forces, wrench


def make_region_mask(contact_indices: np.ndarray, cloud: OrientedPointCloud,
                     seed: int, vicinity: float = MASK_VICINITY_RADIUS,
                     all_ones_prob: float = MASK_ALL_ONES_PROB) -> np.ndarray:
    """All-ones with probability 0.5, else ones near the ground-truth contacts."""
    contact_indices = np.asarray(contact_indices, dtype=int)
    if len(contact_indices) == 0:
        raise ValueError("need at least one contact")
    rng = np.random.default_rng(seed)
    if rng.uniform() < all_ones_prob:
        return np.ones(len(cloud), dtype=bool)
    mask = np.zeros(len(cloud), dtype=bool)
    for idx in contact_indices:
        d2 = np.sum((cloud.points - cloud.points[idx]) ** 2, axis=1)
        mask |= d2 <= vicinity * vicinity
    mask[contact_indices] = True
    return mask


@dataclass
class TrainingExample:
    """One annotated grasp: geometry references plus ground-truth labels."""

    cloud_file: str
    hand_name: str
    mu: float
    contact_indices: np.ndarray
    forces: np.ndarray  # (H, 3)
    wrench: np.ndarray  # (6,)
    heatmap: np.ndarray
    force_map: np.ndarray
    mask: np.ndarray
    task: dict
    base_pose: np.ndarray
    joint_values: np.ndarray
    seed: int


def _task_from_wrench(wrench: np.ndarray, mass: float, inertia: np.ndarray,
                      dt: float = 1.0) -> dict:
    """Invert the inverse-dynamics map so the task reproduces the wrench direction."""
    w = np.asarray(wrench, dtype=float)
    norm = np.linalg.norm(w)
    if norm < 1e-12:
        return {"dx": [0.0, 0.0, 0.0], "dtheta": [0.0, 0.0, 0.0], "dt": dt}
    unit = w / norm
    scale = dt * dt / 2.0
    dx = scale * mass * unit[:3]
    dtheta = scale * (inertia @ unit[3:])
    return {"dx": dx.tolist(), "dtheta": dtheta.tolist(), "dt": dt}


def emit_example(out_dir, example: TrainingExample) -> Path:
    """Write one example directory; float text round-trips bit-exactly."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_score_map(out / "maps.txt", example.heatmap, example.force_map)
    save_mask(out / "mask.txt", example.mask)
    (out / "task.json").write_text(json.dumps(example.task, indent=2) + "\n")
    meta = {
        "cloud_file": example.cloud_file,
        "hand": example.hand_name,
        "mu": example.mu,
        "contact_indices": [int(i) for i in example.contact_indices],
        "forces": [[float(v) for v in f] for f in example.forces],
        "wrench": [float(v) for v in example.wrench],
        "base_pose": [float(v) for v in example.base_pose],
        "joint_values": [float(v) for v in example.joint_values],
        "seed": int(example.seed),
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    return out


def load_example(example_dir, cloud: OrientedPointCloud, validate: bool = True) -> TrainingExample:
    """Reload an example and re-verify its invariants against the cloud."""
    path = Path(example_dir)
    meta = json.loads((path / "meta.json").read_text())
    heatmap, force_map = load_score_map(path / "maps.txt", expected_size=len(cloud))
    mask = load_mask(path / "mask.txt", expected_size=len(cloud))
    task = json.loads((path / "task.json").read_text())
    example = TrainingExample(
        cloud_file=meta["cloud_file"], hand_name=meta["hand"], mu=float(meta["mu"]),
        contact_indices=np.asarray(meta["contact_indices"], dtype=int),
        forces=np.asarray(meta["forces"], dtype=float),
        wrench=np.asarray(meta["wrench"], dtype=float),
        heatmap=heatmap, force_map=force_map, mask=mask, task=task,
        base_pose=np.asarray(meta["base_pose"], dtype=float),
        joint_values=np.asarray(meta["joint_values"], dtype=float),
        seed=int(meta["seed"]),
    )
    if validate:
        validate_example(example, cloud)
    return example


def validate_example(example: TrainingExample, cloud: OrientedPointCloud) -> None:
    """Raise ParseError when any stored label fails its defining invariant."""
    maps = [grasp_map(cloud.points[i], cloud, example.mu) for i in example.contact_indices]
    recomputed = np.zeros(6)
    for g, f in zip(maps, example.forces):
        if not g.cone.contains(f, tol=1e-8):
            raise ParseError("stored force violates its friction cone")
        recomputed += g.wrench_of(f)
    if np.max(np.abs(recomputed - example.wrench)) > WRENCH_RECOMPUTE_TOL:
        raise ParseError("stored wrench disagrees with recomputed grasp-map sum")
    if not example.mask[example.contact_indices].all():
        raise ParseError("region mask excludes a ground-truth contact")
    if (example.heatmap[example.contact_indices] < 0.5).any():
        raise ParseError("heatmap support misses a ground-truth contact")


def generate_examples(hand: HandModel, cloud: OrientedPointCloud, cloud_file: str,
                      count: int, mu: float, seed: int, out_dir,
                      mass: float = 1.0, inertia: np.ndarray | None = None) -> list[Path]:
    """Produce ``count`` examples under out_dir plus an index.json manifest.

    Deterministic in (hand, cloud, count, mu, seed): per-pose RNG streams
    derive from the master seed and the pose counter.
    """
    inertia = np.eye(3) if inertia is None else inertia
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    pose_counter = 0
    while len(written) < count:
        pose = sample_palm_poses(cloud, 1, seed=[seed, pose_counter])[0]
        candidates = sample_grasp_candidates(hand, cloud, pose, seed=[seed, pose_counter, 1])
        for combo_idx, q in enumerate(candidates):
            if len(written) >= count:
                break
            tips = hand.fingertip_positions(q)
            contact_indices = np.array([cloud.nearest_index(p) for p in tips])
            if len(np.unique(contact_indices)) != len(contact_indices):
                continue  # two fingers on one point give a degenerate label
            example_seed = [seed, pose_counter, combo_idx]
            maps = [grasp_map(cloud.points[i], cloud, mu) for i in contact_indices]
            forces, wrench = sample_contact_forces(maps, mu, seed=example_seed)
            mask = make_region_mask(contact_indices, cloud, seed=example_seed + [1])
            heatmap = contact_heatmap_from_pose(cloud, cloud.points[contact_indices])
            force_map = np.zeros((len(cloud), 3))
            force_map[contact_indices] = forces
            example = TrainingExample(
                cloud_file=cloud_file, hand_name=hand.name, mu=mu,
                contact_indices=contact_indices, forces=forces, wrench=wrench,
                heatmap=heatmap, force_map=force_map, mask=mask,
                task=_task_from_wrench(wrench, mass, inertia),
                base_pose=q.base_pose, joint_values=q.joint_values,
                seed=pose_counter,
            )
            written.append(emit_example(out / f"example_{len(written):05d}", example))
        pose_counter += 1
        if pose_counter > 100 * count + 100:
            raise RuntimeError("sampling stalled: object appears ungraspable for this hand")
    index = {
        "cloud_file": cloud_file,
        "hand": hand.name,
        "mu": mu,
        "seed": seed,
        "examples": [p.name for p in written],
    }
    (out / "index.json").write_text(json.dumps(index, indent=2) + "\n")
    return written
