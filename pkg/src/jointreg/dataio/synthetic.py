"""Seeded synthetic datasets with known ground truth.

A toy body is built from tube-shaped parts, one per joint. Every frame samples a
true pose, shape and translation, renders a hard mask, and regresses ground-truth
joints with a planted sparse regressor J*. The estimated parameters handed to the
pipeline are the truth plus recorded noise.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..body_model import BodyModel, BodyParams, forward
from ..camera_render import Camera, rasterize_hard
from ..errors import DataError
from ..regressor import JointRegressor
from .container import write_container
from .images import write_pgm
from .manifest import MANIFEST_FORMAT, MANIFEST_VERSION, TEST_SUBJECTS, TRAIN_SUBJECTS
from .records import save_joints, save_model, save_poses, save_regressor

RING = 5

# joint layout for the first five joints: pelvis, chest, head, left leg, right leg
_BASE_PARENTS = [-1, 0, 1, 0, 0]
_BASE_OFFSETS = np.array(
    [[0.0, 0.0, 0.0], [0.0, 0.28, 0.0], [0.0, 0.3, 0.0], [0.1, -0.08, 0.0], [-0.1, -0.08, 0.0]]
)
_BASE_DIRECTIONS = np.array(
    [[0.0, 0.22, 0.0], [0.0, 0.26, 0.0], [0.0, 0.18, 0.0], [0.02, -0.42, 0.0], [-0.02, -0.42, 0.0]]
)


@dataclass
class SyntheticScenario:
    n_vertices: int = 50
    n_joints: int = 5
    n_targets: int = 5
    n_shape: int = 2
    n_frames: int = 50
    n_test_frames: int = 20
    regressor_support: int = 2
    pose_noise: float = 0.05
    shape_noise: float = 0.0
    joint_noise_mm: float = 0.0
    mask_flip: float = 0.0
    std_mix: float = 0.5
    image_size: int = 64
    focal: float = 140.0
    camera_distance: float = 3.0
    sigma: float = 1.5
    true_pose_scale: float = 0.35
    pose_basis_scale: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        problems = []
        if self.n_joints < 1 or self.n_shape < 0:
            problems.append("need at least one joint and a non-negative shape count")
        if self.n_vertices < RING * self.n_joints:
            problems.append(f"n_vertices must be >= {RING} per joint ({RING * self.n_joints})")
        if not 1 <= self.n_targets <= self.n_vertices:
            problems.append("n_targets must be between 1 and n_vertices")
        if not 0 <= self.n_test_frames <= self.n_frames or self.n_frames < 1:
            problems.append("need n_frames >= 1 and 0 <= n_test_frames <= n_frames")
        if self.n_frames - self.n_test_frames < 1:
            problems.append("need at least one training frame")
        if not 1 <= self.regressor_support <= RING:
            problems.append(f"regressor_support must be between 1 and {RING}")
        if min(self.pose_noise, self.shape_noise, self.joint_noise_mm) < 0 or not 0 <= self.mask_flip <= 1:
            problems.append("noise levels must be non-negative and mask_flip in [0, 1]")
        if self.image_size < 4 or self.focal <= 0 or self.camera_distance <= 1.0:
            problems.append("image_size >= 4, focal > 0 and camera_distance > 1 required")
        if problems:
            raise DataError("invalid scenario: " + "; ".join(problems))


PRESETS = {
    "mini": SyntheticScenario(),
    "tiny": SyntheticScenario(n_frames=12, n_test_frames=4, image_size=32, focal=70.0),
}


def _joint_layout(rng, n_joints):
    parents = list(_BASE_PARENTS[:n_joints])
    offsets = list(_BASE_OFFSETS[:n_joints])
    directions = list(_BASE_DIRECTIONS[:n_joints])
    for j in range(len(parents), n_joints):
        p = int(rng.integers(0, j))
        d = rng.normal(size=3)
        d[2] *= 0.3
        d *= 0.2 / np.linalg.norm(d)
        parents.append(p)
        offsets.append(directions[p] * 0.9)
        directions.append(d)
    positions = np.zeros((n_joints, 3))
    for j in range(n_joints):
        positions[j] = offsets[j] if parents[j] < 0 else positions[parents[j]] + offsets[j]
    return np.array(parents), positions, np.array(directions)


def _frame(direction):
    axis = direction / np.linalg.norm(direction)
    helper = np.array([0.0, 0.0, 1.0]) if abs(axis[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e1 = np.cross(axis, helper)
    e1 /= np.linalg.norm(e1)
    return axis, e1, np.cross(axis, e1)


def toy_model(rng, n_vertices=50, n_joints=5, n_shape=2, pose_basis_scale=0.0):
    """Tube-per-joint toy body. Returns (model, part index of every vertex)."""
    parents, joints, directions = _joint_layout(rng, n_joints)
    counts = np.full(n_joints, n_vertices // n_joints)
    counts[: n_vertices % n_joints] += 1
    verts, faces, part, base_rings, along = [], [], [], [], []
    for j in range(n_joints):
        axis, e1, e2 = _frame(directions[j])
        length = np.linalg.norm(directions[j])
        n_rings = counts[j] // RING
        extra = counts[j] - n_rings * RING
        start = len(verts)
        radius = 0.07 if j == 0 else 0.05
        for r in range(n_rings):
            t = r / max(n_rings - 1, 1)
            centre = joints[j] + t * length * axis
            for q in range(RING):
                ang = 2 * np.pi * q / RING
                verts.append(centre + radius * (np.cos(ang) * e1 + np.sin(ang) * e2))
                along.append(t)
            if r > 0:
                a0, b0 = start + (r - 1) * RING, start + r * RING
                for q in range(RING):
                    q1 = (q + 1) % RING
                    faces.append([a0 + q, a0 + q1, b0 + q])
                    faces.append([a0 + q1, b0 + q1, b0 + q])
        for cap in (start, start + (n_rings - 1) * RING):
            for q in range(1, RING - 1):
                faces.append([cap, cap + q, cap + q + 1])
        for x in range(extra):
            t = (x + 1) / (extra + 1)
            verts.append(joints[j] + t * length * axis)
            along.append(t)
        base_rings.append(np.arange(start, start + RING))
        part.extend([j] * counts[j])
    verts = np.array(verts)
    part = np.array(part)
    along = np.array(along)

    weights = np.zeros((n_vertices, n_joints))
    for i in range(n_vertices):
        j = part[i]
        if parents[j] < 0:
            weights[i, j] = 1.0
        else:
            own = 0.55 + 0.45 * along[i] * rng.uniform(0.6, 1.0) + 0.0
            own = min(own, 1.0)
            weights[i, j] = own
            weights[i, parents[j]] = 1.0 - own
    skel = np.zeros((n_joints, n_vertices))
    for j in range(n_joints):
        skel[j, base_rings[j]] = 1.0 / RING

    basis = np.zeros((n_shape, n_vertices, 3))
    if n_shape >= 1:
        basis[0] = 0.05 * verts  # overall size
    for b in range(1, n_shape):
        thickness = rng.normal(scale=0.01, size=n_joints)
        centre_line = joints[part] + along[:, None] * directions[part]
        radial = verts - centre_line
        norm = np.linalg.norm(radial, axis=1, keepdims=True)
        radial = np.divide(radial, norm, out=np.zeros_like(radial), where=norm > 0)
        basis[b] = thickness[part, None] * radial + rng.normal(scale=0.002, size=(n_vertices, 3))
    pose_basis = None
    if pose_basis_scale > 0:
        pose_basis = rng.normal(scale=pose_basis_scale, size=(9 * (n_joints - 1), n_vertices, 3))
    model = BodyModel(
        verts, basis, weights, parents, skel, faces=np.array(faces), pose_basis=pose_basis,
        use_pose_blendshapes=pose_basis is not None,
    )
    return model, part


def planted_regressor(rng, model: BodyModel, part, n_targets, support):
    """Sparse non-negative row-sum-1 regressor; row m draws from joint (m mod K)'s base ring."""
    weights = np.zeros((n_targets, model.n_vertices))
    for m in range(n_targets):
        j = m % model.n_joints
        ring = np.flatnonzero(model.skeleton_regressor[j] > 0)
        cols = rng.choice(ring, size=support, replace=False)
        w = rng.dirichlet(np.full(support, 2.0))
        weights[m, cols] = w
    return weights


def offset_regressor(rng, weights, part, mix, template=None, nearest=3):
    """A deliberately misplaced copy: each row moves ``mix`` of its mass to another vertex of the same part.

    With ``template`` given, the new vertex is one of the ``nearest`` same-part vertices
    closest to the planted joint, which keeps the offset at a few centimetres.
    """
    out = (1.0 - mix) * weights
    for m in range(weights.shape[0]):
        support = np.flatnonzero(weights[m] > 0)
        candidates = np.setdiff1d(np.flatnonzero(part == part[support[0]]), support)
        if template is not None:
            dist = np.linalg.norm(template[candidates] - weights[m] @ template, axis=1)
            candidates = candidates[np.argsort(dist, kind="stable")[:nearest]]
        out[m, rng.choice(candidates)] += mix
    return out


def synthetic_camera(s: SyntheticScenario) -> Camera:
    # looks down -z with image y pointing down
    centre = (s.image_size - 1) / 2.0
    return Camera(
        s.focal, s.focal, centre, centre, s.image_size, s.image_size,
        rotation=np.diag([1.0, -1.0, -1.0]), translation=[0.0, 0.0, s.camera_distance],
    )


def _subjects(n_frames, n_test):
    n_train = n_frames - n_test
    tags = [TRAIN_SUBJECTS[i * len(TRAIN_SUBJECTS) // n_train] for i in range(n_train)]
    tags += [TEST_SUBJECTS[i * len(TEST_SUBJECTS) // max(n_test, 1)] for i in range(n_test)]
    return tags


def generate_synthetic(scenario: SyntheticScenario, out_dir) -> Path:
    """Write a complete dataset to ``out_dir`` and return the manifest path."""
    scenario.validate()
    s = scenario
    rng = np.random.default_rng(s.seed)
    model, part = toy_model(rng, s.n_vertices, s.n_joints, s.n_shape, s.pose_basis_scale)
    j_star = planted_regressor(rng, model, part, s.n_targets, s.regressor_support)
    j_std = offset_regressor(rng, j_star, part, s.std_mix, model.template_vertices)
    camera = synthetic_camera(s)

    out = Path(out_dir)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    subjects = _subjects(s.n_frames, s.n_test_frames)
    init_poses, true_poses, joints, truth, frames = {}, {}, {}, {}, []
    for f in range(s.n_frames):
        fid = f"{subjects[f]}_{f:04d}"
        pose = rng.normal(scale=s.true_pose_scale, size=(s.n_joints, 3))
        pose[0] = rng.normal(scale=0.15, size=3)
        shape = rng.normal(size=s.n_shape)
        trans = rng.uniform(-0.1, 0.1, size=3)
        true = BodyParams(pose, shape)
        verts = forward(model, true).vertices + trans
        joint_noise = rng.normal(scale=s.joint_noise_mm / 1000.0, size=(s.n_targets, 3))
        gt = j_star @ verts + joint_noise
        mask = rasterize_hard(camera, model.faces, verts)
        flips = rng.random(mask.shape) < s.mask_flip
        mask = np.where(flips, 1.0 - mask, mask)
        pose_noise = rng.normal(scale=s.pose_noise, size=pose.shape)
        shape_noise = rng.normal(scale=s.shape_noise, size=shape.shape)
        init_poses[fid] = (BodyParams(pose + pose_noise, shape + shape_noise), trans)
        true_poses[fid] = (true, trans)
        joints[fid] = gt
        truth[f"{fid}/pose_noise"] = pose_noise
        truth[f"{fid}/shape_noise"] = shape_noise
        truth[f"{fid}/joint_noise"] = joint_noise
        truth[f"{fid}/mask_flips"] = flips.astype(np.int64)
        write_pgm(out / "masks" / f"{fid}.pgm", mask, bits=8)
        frames.append({
            "id": fid,
            "subject": subjects[f],
            "pose_key": fid,
            "joints_key": fid,
            "mask": f"masks/{fid}.pgm",
            "camera": camera.to_dict(),
            "crop": {"x0": 0, "y0": 0, "width": s.image_size, "height": s.image_size},
        })

    save_model(out / "model.rgft", model)
    save_poses(out / "poses_init.rgft", init_poses, {"source": "synthetic estimate"})
    save_poses(out / "poses_true.rgft", true_poses, {"source": "synthetic truth"})
    save_joints(out / "joints.rgft", joints)
    save_regressor(out / "J_star.rgft", JointRegressor(j_star, solver="planted"))
    save_regressor(out / "J_std.rgft", JointRegressor(j_std, solver="planted-offset"))
    truth["J_star"] = j_star
    truth["vertex_part"] = part
    write_container(out / "truth.rgft", truth, {"kind": "synthetic_truth", "scenario": asdict(s)})
    manifest = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "model": "model.rgft",
        "poses": "poses_init.rgft",
        "joints": "joints.rgft",
        "regressors": {"std": "J_std.rgft"},
        "render": {"sigma": s.sigma},
        "split": {"train": list(TRAIN_SUBJECTS), "test": list(TEST_SUBJECTS)},
        "frames": frames,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    (out / "scenario.json").write_text(json.dumps(asdict(s), indent=1, sort_keys=True) + "\n")
    return path
