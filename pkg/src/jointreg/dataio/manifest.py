"""Dataset manifests: a versioned JSON document naming the model, poses, joints,
masks and calibrated cameras of every frame, plus the subject split.

Schema (version 1)::

    {
      "format": "jointreg-manifest", "version": 1,
      "model": "model.rgft",            # body model container
      "poses": "poses_init.rgft",       # pose set: <pose_key>/pose, /shape, /translation
      "joints": "joints.rgft",          # joint set: <joints_key> -> M x 3 metres
      "regressors": {"std": "J_std.rgft"},          # optional named regressors
      "render": {"sigma": 1.5},                      # optional
      "split": {"train": ["S1", ...], "test": ["S9", "S11"]},
      "frames": [{"id", "subject", "pose_key", "joints_key", "mask",
                  "camera": {fx, fy, cx, cy, width, height, rotation, translation},
                  "crop": {x0, y0, width, height}}]
    }

Paths are relative to the manifest's directory. Cameras describe the full image;
masks are stored already cropped to ``crop``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..camera_render import Camera
from ..errors import ManifestError

MANIFEST_FORMAT = "jointreg-manifest"
MANIFEST_VERSION = 1
TRAIN_SUBJECTS = ("S1", "S5", "S6", "S7", "S8")
TEST_SUBJECTS = ("S9", "S11")


@dataclass(frozen=True)
class FrameEntry:
    id: str
    subject: str
    pose_key: str
    joints_key: str
    mask: str
    camera: Camera
    crop: dict

    @property
    def crop_camera(self) -> Camera:
        c = self.crop
        return self.camera.cropped(c["x0"], c["y0"], c["width"], c["height"])


@dataclass
class DatasetManifest:
    path: Path
    model: str
    poses: str
    joints: str
    frames: list
    split: dict
    regressors: dict = field(default_factory=dict)
    render: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict, repr=False)

    @property
    def root(self) -> Path:
        return self.path.parent

    def resolve(self, rel) -> Path:
        return (self.root / rel).resolve()

    def frames_in(self, split: str = "all") -> list:
        if split == "all":
            return list(self.frames)
        if split not in self.split:
            raise KeyError(f"unknown split {split!r}")
        subjects = set(self.split[split])
        return [f for f in self.frames if f.subject in subjects]

    @property
    def sigma(self) -> float:
        return float(self.render.get("sigma", 1.5))

    def load_model(self, **kw):
        from .records import load_model

        return load_model(self.resolve(self.model), **kw)

    def load_poses(self) -> dict:
        from .records import load_poses

        return load_poses(self.resolve(self.poses))

    def load_joints(self) -> dict:
        from .records import load_joints

        return load_joints(self.resolve(self.joints))

    def load_mask(self, frame: FrameEntry) -> np.ndarray:
        from .images import read_pgm

        return read_pgm(self.resolve(frame.mask))


def _check_camera(d, where, problems):
    try:
        cam = Camera.from_dict(d)
    except (KeyError, TypeError, ValueError) as exc:
        problems.append(f"{where}: invalid camera ({exc})")
        return None
    return cam


def validate_manifest_dict(raw: dict, root: Path, check_files: bool = True) -> list:
    """Every violation found in a manifest document (empty list when valid)."""
    problems = []
    if raw.get("format") != MANIFEST_FORMAT:
        problems.append(f"format must be {MANIFEST_FORMAT!r}, got {raw.get('format')!r}")
    if raw.get("version") != MANIFEST_VERSION:
        problems.append(f"unsupported manifest version {raw.get('version')!r}")
    for key in ("model", "poses", "joints", "frames", "split"):
        if key not in raw:
            problems.append(f"missing required key {key!r}")
    split = raw.get("split", {})
    train, test = set(split.get("train", [])), set(split.get("test", []))
    if "train" not in split or "test" not in split:
        problems.append("split must define 'train' and 'test' subject lists")
    for subject in sorted(train & test, key=str):
        problems.append(f"split overlap: subject {subject} is in both train and test")

    frames = raw.get("frames", [])
    seen = set()
    for i, fr in enumerate(frames):
        where = f"frame[{i}]" + (f" ({fr.get('id')})" if isinstance(fr, dict) and "id" in fr else "")
        if not isinstance(fr, dict):
            problems.append(f"{where}: not an object")
            continue
        for key in ("id", "subject", "pose_key", "joints_key", "mask", "camera", "crop"):
            if key not in fr:
                problems.append(f"{where}: missing {key!r}")
        if fr.get("id") in seen:
            problems.append(f"{where}: duplicate frame id")
        seen.add(fr.get("id"))
        if "subject" in fr and fr["subject"] not in train | test:
            problems.append(f"{where}: subject {fr['subject']} is in neither split")
        cam = _check_camera(fr["camera"], where, problems) if "camera" in fr else None
        crop = fr.get("crop")
        if isinstance(crop, dict) and cam is not None:
            try:
                x0, y0, w, h = (int(crop[k]) for k in ("x0", "y0", "width", "height"))
                if w < 1 or h < 1 or x0 < 0 or y0 < 0 or x0 + w > cam.width or y0 + h > cam.height:
                    problems.append(f"{where}: crop {crop} lies outside the {cam.width}x{cam.height} image")
            except (KeyError, TypeError, ValueError):
                problems.append(f"{where}: crop needs integer x0, y0, width, height")

    if check_files:
        problems.extend(_check_files(raw, root, frames))
    return problems


def _check_files(raw, root, frames):
    from .container import read_container
    from .images import read_pgm

    problems = []
    containers = {}
    for key in ("model", "poses", "joints"):
        if key in raw:
            p = root / raw[key]
            if not p.is_file():
                problems.append(f"{key} file not found: {p}")
                continue
            try:
                containers[key] = read_container(p)
            except Exception as exc:  # format errors are reported, not raised
                problems.append(f"{key} file {p} unreadable: {exc}")
    for name, rel in raw.get("regressors", {}).items():
        if not (root / rel).is_file():
            problems.append(f"regressor {name!r} file not found: {root / rel}")
    for i, fr in enumerate(frames):
        if not isinstance(fr, dict):
            continue
        where = f"frame[{i}] ({fr.get('id')})"
        if "poses" in containers and "pose_key" in fr:
            for part in ("pose", "shape", "translation"):
                if f"{fr['pose_key']}/{part}" not in containers["poses"]:
                    problems.append(f"{where}: pose set lacks {fr['pose_key']}/{part}")
        if "joints" in containers and "joints_key" in fr and fr["joints_key"] not in containers["joints"]:
            problems.append(f"{where}: joint set lacks {fr['joints_key']!r}")
        if "mask" in fr:
            p = root / fr["mask"]
            if not p.is_file():
                problems.append(f"{where}: mask not found: {p}")
            elif isinstance(fr.get("crop"), dict):
                try:
                    shape = read_pgm(p).shape
                    want = (int(fr["crop"]["height"]), int(fr["crop"]["width"]))
                    if shape != want:
                        problems.append(f"{where}: mask is {shape[1]}x{shape[0]}, crop is {want[1]}x{want[0]}")
                except Exception as exc:
                    problems.append(f"{where}: mask unreadable: {exc}")
    return problems


def load_manifest(path, check_files: bool = True) -> DatasetManifest:
    """Load and fully validate a manifest; ``check_files=False`` validates structure only."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ManifestError([f"manifest not found: {path}"]) from None
    except json.JSONDecodeError as exc:
        raise ManifestError([f"manifest is not valid JSON: {exc}"]) from None
    problems = validate_manifest_dict(raw, path.parent, check_files)
    if problems:
        raise ManifestError(problems)
    frames = [
        FrameEntry(
            str(fr["id"]), str(fr["subject"]), str(fr["pose_key"]), str(fr["joints_key"]),
            str(fr["mask"]), Camera.from_dict(fr["camera"]), dict(fr["crop"]),
        )
        for fr in raw["frames"]
    ]
    return DatasetManifest(
        path=path.resolve(),
        model=raw["model"],
        poses=raw["poses"],
        joints=raw["joints"],
        frames=frames,
        split={k: list(v) for k, v in raw["split"].items()},
        regressors=dict(raw.get("regressors", {})),
        render=dict(raw.get("render", {})),
        raw=raw,
    )


def h36m_manifest_template(frames_per_subject: int = 1) -> dict:
    """A structural template for Human3.6m exports (paths only, no data).

    Camera numbers are placeholders with the dataset's 1000x1002 image size; a
    licensed user replaces them with the calibrated values of each sequence.
    """
    frames = []
    for subject in TRAIN_SUBJECTS + TEST_SUBJECTS:
        for k in range(frames_per_subject):
            fid = f"{subject}_Directions_1.54138969_{k:06d}"
            frames.append({
                "id": fid,
                "subject": subject,
                "pose_key": fid,
                "joints_key": fid,
                "mask": f"masks/{fid}.pgm",
                "camera": {
                    "fx": 1145.0, "fy": 1144.0, "cx": 512.5, "cy": 515.5,
                    "width": 1000, "height": 1002,
                    "rotation": np.eye(3).tolist(), "translation": [0.0, 0.0, 0.0],
                },
                "crop": {"x0": 388, "y0": 391, "width": 224, "height": 224},
            })
    return {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "model": "smpl_neutral.rgft",
        "poses": "spin_poses.rgft",
        "joints": "h36m_joints.rgft",
        "regressors": {"std": "J_regressor_h36m.txt"},
        "render": {"sigma": 1.5},
        "split": {"train": list(TRAIN_SUBJECTS), "test": list(TEST_SUBJECTS)},
        "frames": frames,
    }
