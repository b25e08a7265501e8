"""Contact selection, palm-pose initialization, and the direct-grasp baseline.

Contacts come from per-point score maps via non-maximum suppression under a
region mask. The initial palm pose is found by enumerating injective
fingertip-to-contact assignments, rigidly fitting the rest-pose fingertips
to each assignment, and scoring candidates by heatmap IoU.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import permutations

import numpy as np

from .errors import DegenerateGeometry, EmptySelection, NoContact, ParseError
from .geometry import OrientedPointCloud
from .kinematics import HandModel, JointConfig
from .transforms import (make_transform, matrix_to_rotvec, rotation_between,
                         rotvec_to_matrix, transform_points)
from .wrench import ContactForceSet, grasp_map, optimal_contact_forces

DEFAULT_HEATMAP_SIGMA = 0.01  # m, kernel width of pose-generated heatmaps
DEFAULT_IOU_THRESHOLD = 0.5
DEFAULT_NMS_RADIUS = 0.03  # m
MAX_ASSIGNMENT_FINGERS = 5  # enumeration cap: 5! orderings
CONTACT_THRESHOLD = 0.002  # m, "touching" distance for the baseline
APPROACH_TRAVEL_BOUND = 1.0  # m


@dataclass
class ContactSolution:
    indices: np.ndarray  # selected cloud point indices
    points: np.ndarray  # (H, 3)
    forces: np.ndarray  # (H, 3) from the force map (zeros when absent)


def select_contacts_nms(scores: np.ndarray, mask: np.ndarray | None,
                        cloud: OrientedPointCloud, count: int,
                        radius: float = DEFAULT_NMS_RADIUS) -> np.ndarray:
    """Greedy descending-score selection with radius suppression.

    Masked-out points are never selected; ties break toward the lower point
    index. Returns at most ``count`` indices; raises EmptySelection when the
    mask admits nothing.
    """
    scores = np.asarray(scores, dtype=float)
    if count < 1:
        raise ValueError("count must be at least 1")
    if radius <= 0:
        raise ValueError("radius must be positive")
    allowed = np.ones(len(scores), dtype=bool) if mask is None else np.asarray(mask, dtype=bool).copy()
    if len(allowed) != len(scores) or len(scores) != len(cloud):
        raise ValueError("scores, mask, and cloud sizes must agree")
    if not allowed.any():
        raise EmptySelection("region mask allows no points")
    # stable order: descending score, ascending index on ties
    order = np.lexsort((np.arange(len(scores)), -scores))
    selected = []
    alive = allowed.copy()
    for idx in order:
        if not alive[idx]:
            continue
        selected.append(int(idx))
        if len(selected) == count:
            break
        d2 = np.sum((cloud.points - cloud.points[idx]) ** 2, axis=1)
        alive &= d2 > radius * radius
    return np.array(selected, dtype=int)


def contact_solution_from_maps(cloud: OrientedPointCloud, indices: np.ndarray,
                               force_map: np.ndarray | None = None) -> ContactSolution:
    indices = np.asarray(indices, dtype=int)
    forces = (np.asarray(force_map, dtype=float)[indices]
              if force_map is not None else np.zeros((len(indices), 3)))
    return ContactSolution(indices=indices, points=cloud.points[indices].copy(), forces=forces)


def kabsch_align(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Least-squares rigid transform (4x4) mapping src onto dst, det(R) = +1."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ValueError("src and dst must both be (k, 3)")
    if len(src) < 3:
        raise ValueError("need at least 3 point pairs")
    c_src = src.mean(axis=0)
    c_dst = dst.mean(axis=0)
    H = (src - c_src).T @ (dst - c_dst)
    sv = np.linalg.svd(H, compute_uv=False)
    if sv[1] <= max(1e-9 * sv[0], 1e-15):
        raise DegenerateGeometry("point sets are collinear; rotation is underdetermined")
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    T = np.eye(4)
    T[:3, :3] = R
    T[:3, 3] = c_dst - R @ c_src
    return T


def contact_heatmap_from_pose(cloud: OrientedPointCloud, fingertips: np.ndarray,
                              sigma: float = DEFAULT_HEATMAP_SIGMA) -> np.ndarray:
    """Gaussian kernel on distance to the nearest fingertip, per cloud point."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    fingertips = np.atleast_2d(fingertips)
    d2 = np.min(np.sum((cloud.points[:, None, :] - fingertips[None, :, :]) ** 2, axis=2), axis=1)
    return np.exp(-d2 / (2.0 * sigma * sigma))


def heatmap_iou(a: np.ndarray, b: np.ndarray, threshold: float = DEFAULT_IOU_THRESHOLD) -> float:
    """Intersection over union of the two binarized score maps; 1.0 when both empty."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError("heatmaps must have equal length")
    A = a >= threshold
    B = b >= threshold
    union = np.count_nonzero(A | B)
    if union == 0:
        return 1.0
    return float(np.count_nonzero(A & B) / union)


def _rest_fingertips_local(hand: HandModel) -> np.ndarray:
    rest = JointConfig(np.zeros(6), hand.rest_pose.joint_values)
    return hand.fingertip_positions(rest)


def _fallback_pose(hand: HandModel, cloud: OrientedPointCloud,
                   contacts: ContactSolution) -> np.ndarray:
    """Centroid-and-normal alignment used when fewer than 3 contacts exist."""
    tips_local = _rest_fingertips_local(hand)
    centroid_tips = tips_local.mean(axis=0)
    centroid_contacts = contacts.points.mean(axis=0)
    normals = cloud.normals[contacts.indices]
    mean_normal = normals.mean(axis=0)
    norm = np.linalg.norm(mean_normal)
    mean_normal = mean_normal / norm if norm > 1e-12 else np.array([0.0, 0.0, 1.0])
    # palm axis should approach against the mean outward normal
    R = rotation_between(hand.palm_axis, -mean_normal)
    T = np.eye(4)
    T[:3, :3] = R
    T[:3, 3] = centroid_contacts - R @ centroid_tips
    return T


def init_palm_pose(hand: HandModel, cloud: OrientedPointCloud, contacts: ContactSolution,
                   predicted_heatmap: np.ndarray,
                   sigma: float = DEFAULT_HEATMAP_SIGMA,
                   iou_threshold: float = DEFAULT_IOU_THRESHOLD) -> tuple[JointConfig, float]:
    """Best rigid placement of the rest-pose hand over the contact points.

    Enumerates every injective assignment of contact points to fingertips,
    aligns the rest fingertips to the assigned contacts, scores candidates
    by IoU between the pose-generated and predicted heatmaps, and returns
    the winner with its score.
    """
    m = hand.num_fingertips
    H = len(contacts.indices)
    if H > m:
        raise ValueError(f"{H} contacts exceed the {m} fingertips")
    if m > MAX_ASSIGNMENT_FINGERS:
        raise ValueError(f"assignment enumeration capped at {MAX_ASSIGNMENT_FINGERS} fingertips")
    tips_local = _rest_fingertips_local(hand)
    best_T = None
    best_iou = -1.0
    if H >= 3:
        for perm in permutations(range(m), H):
            try:
                T = kabsch_align(tips_local[list(perm)], contacts.points)
            except DegenerateGeometry:
                continue
            tips_world = transform_points(T, tips_local)
            candidate = contact_heatmap_from_pose(cloud, tips_world, sigma)
            score = heatmap_iou(candidate, predicted_heatmap, iou_threshold)
            if score > best_iou:
                best_iou = score
                best_T = T
    if best_T is None:
        best_T = _fallback_pose(hand, cloud, contacts)
        tips_world = transform_points(best_T, tips_local)
        best_iou = heatmap_iou(contact_heatmap_from_pose(cloud, tips_world, sigma),
                               predicted_heatmap, iou_threshold)
    base_pose = np.concatenate([best_T[:3, 3], matrix_to_rotvec(best_T[:3, :3])])
    return JointConfig(base_pose, hand.rest_pose.joint_values), float(best_iou)


# -- direct-grasp baseline -------------------------------------------------


def _open_joint_values(hand: HandModel) -> np.ndarray:
    """Per-joint limit choice maximizing mean pairwise fingertip distance."""
    lo, hi = hand.joint_limits_vector()
    values = hand.rest_pose.joint_values.copy()

    def aperture(vals):
        tips = hand.fingertip_positions(JointConfig(np.zeros(6), vals))
        if len(tips) < 2:
            return float(np.linalg.norm(tips[0]))
        total = 0.0
        for i in range(len(tips)):
            for j in range(i + 1, len(tips)):
                total += np.linalg.norm(tips[i] - tips[j])
        return total

    for j in range(len(values)):
        take_lo = values.copy()
        take_lo[j] = lo[j]
        take_hi = values.copy()
        take_hi[j] = hi[j]
        values = take_lo if aperture(take_lo) >= aperture(take_hi) else take_hi
    return values


def baseline_direct_grasp(hand: HandModel, cloud: OrientedPointCloud,
                          approach_pose: np.ndarray, target=None, mu: float = 0.5,
                          contact_threshold: float = CONTACT_THRESHOLD,
                          travel_bound: float = APPROACH_TRAVEL_BOUND,
                          step: float = 0.001) -> tuple[JointConfig, ContactForceSet]:
    """Open the fingers fully, drive toward the center, close on contact.

    The base translates along the palm-to-centroid direction until any
    collision sphere surface comes within ``contact_threshold`` of the
    object, then each finger closes uniformly until its tip touches or its
    limits stop it. Forces are the optimal cone-feasible solve at the final
    fingertips against ``target`` (zero wrench when omitted).
    """
    approach_pose = np.asarray(approach_pose, dtype=float)
    open_values = _open_joint_values(hand)
    q = JointConfig(approach_pose, open_values)

    centroid = cloud.points.mean(axis=0)
    T_base = make_transform(q.base_pose[3:], q.base_pose[:3])
    palm_world = T_base[:3, :3] @ hand.palm_center + T_base[:3, 3]
    direction = centroid - palm_world
    dist = np.linalg.norm(direction)
    if dist < 1e-9:
        raise NoContact("palm already at the object centroid")
    direction /= dist

    radii = hand.sphere_radii()

    def sphere_gap(config):
        centers = hand.sphere_centers(config)
        return float(np.min(cloud.signed_distances(centers) - radii))

    travel = 0.0
    base0 = q.base_pose.copy()
    while sphere_gap(q) > contact_threshold:
        travel += step
        if travel > travel_bound:
            raise NoContact(f"no contact within {travel_bound} m of travel")
        q = JointConfig(np.concatenate([base0[:3] + travel * direction, base0[3:]]),
                        q.joint_values)

    # close each finger uniformly toward the opposite limit ends
    lo, hi = hand.joint_limits_vector()
    closed_values = np.where(open_values == lo, hi, lo)
    values = q.joint_values.copy()
    for finger in range(hand.num_fingertips):
        chain = hand.finger_chain(finger)
        if not chain:
            continue
        best = values.copy()
        for lam in np.linspace(0.0, 1.0, 201):
            trial = values.copy()
            trial[chain] = (1 - lam) * open_values[chain] + lam * closed_values[chain]
            cfg = JointConfig(q.base_pose, trial)
            tip = hand.fingertip_positions(cfg)[finger]
            best = trial
            if cloud.signed_distance(tip) <= contact_threshold:
                break
        values = best
    q = JointConfig(q.base_pose, values)

    tips = hand.fingertip_positions(q)
    maps = [grasp_map(p, cloud, mu) for p in tips]
    w = np.zeros(6) if target is None else np.asarray(target, dtype=float)
    forces = optimal_contact_forces(maps, w)
    return q, forces


# -- score-map files --------------------------------------------------------


def load_score_map(path, expected_size: int | None = None):
    """Read `score fx fy fz` lines; returns (scores, force_map)."""
    scores, vecs = [], []
    with open(str(path), "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            fields = line.split()
            if len(fields) != 4:
                raise ParseError(f"expected 4 fields, got {len(fields)}", path=str(path), line=lineno)
            try:
                vals = [float(f) for f in fields]
            except ValueError as exc:
                raise ParseError(f"bad number: {exc}", path=str(path), line=lineno) from exc
            scores.append(vals[0])
            vecs.append(vals[1:])
    scores = np.clip(np.asarray(scores, dtype=float), 0.0, 1.0)
    vecs = np.asarray(vecs, dtype=float)
    if expected_size is not None and len(scores) != expected_size:
        raise ParseError(f"expected {expected_size} records, found {len(scores)}", path=str(path))
    return scores, vecs


def save_score_map(path, scores: np.ndarray, force_map: np.ndarray | None = None) -> None:
    scores = np.asarray(scores, dtype=float)
    if force_map is None:
        force_map = np.zeros((len(scores), 3))
    with open(str(path), "w", encoding="utf-8") as fh:
        fh.write("# score fx fy fz\n")
        for s, v in zip(scores, force_map):
            fh.write(f"{s:.17g} {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")


def load_mask(path, expected_size: int | None = None) -> np.ndarray:
    bits = []
    with open(str(path), "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if line not in ("0", "1"):
                raise ParseError(f"mask lines must be 0 or 1, got {line!r}",
                                 path=str(path), line=lineno)
            bits.append(line == "1")
    mask = np.asarray(bits, dtype=bool)
    if expected_size is not None and len(mask) != expected_size:
        raise ParseError(f"expected {expected_size} records, found {len(mask)}", path=str(path))
    return mask


def save_mask(path, mask: np.ndarray) -> None:
    with open(str(path), "w", encoding="utf-8") as fh:
        for bit in np.asarray(mask, dtype=bool):
            fh.write("1\n" if bit else "0\n")
