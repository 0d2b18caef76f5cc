"""File formats, manifests, splits and the synthetic-data generator."""

from .container import TensorContainer, read_container, write_container
from .images import read_pgm, read_ppm, write_pgm, write_ppm
from .manifest import (
    TEST_SUBJECTS,
    TRAIN_SUBJECTS,
    DatasetManifest,
    FrameEntry,
    h36m_manifest_template,
    load_manifest,
)
from .records import (
    load_joints,
    load_model,
    load_poses,
    load_regressor,
    save_joints,
    save_model,
    save_poses,
    save_regressor,
)
from .synthetic import PRESETS, SyntheticScenario, generate_synthetic, toy_model

__all__ = [
    "TensorContainer", "read_container", "write_container",
    "read_pgm", "write_pgm", "read_ppm", "write_ppm",
    "DatasetManifest", "FrameEntry", "load_manifest", "h36m_manifest_template",
    "TRAIN_SUBJECTS", "TEST_SUBJECTS",
    "load_model", "save_model", "load_regressor", "save_regressor",
    "load_poses", "save_poses", "load_joints", "save_joints",
    "SyntheticScenario", "PRESETS", "generate_synthetic", "toy_model",
]
