"""Model, regressor, pose-set and joint-set files built on the tensor container."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from ..body_model import BodyModel, BodyParams
from ..errors import ContainerFormatError, DataError
from ..regressor import JointRegressor
from .container import read_container, write_container


def save_model(path, model: BodyModel) -> None:
    arrays = {
        "template": model.template_vertices,
        "shape_basis": model.shape_basis,
        "skin_weights": model.skin_weights,
        "parents": model.parents,
        "skeleton_regressor": model.skeleton_regressor,
    }
    if model.faces is not None:
        arrays["faces"] = model.faces
    if model.pose_basis is not None:
        arrays["pose_basis"] = model.pose_basis
    header = {
        "kind": "body_model",
        "n_vertices": model.n_vertices,
        "n_joints": model.n_joints,
        "n_shape": model.n_shape,
        "use_pose_blendshapes": model.use_pose_blendshapes,
    }
    write_container(path, arrays, header)


def load_model(path, use_pose_blendshapes: bool | None = None) -> BodyModel:
    c = read_container(path)
    missing = [k for k in ("template", "shape_basis", "skin_weights", "parents", "skeleton_regressor") if k not in c]
    if missing:
        raise ContainerFormatError(f"model file {path} lacks arrays {missing}")
    h = c.header
    model = BodyModel(
        c["template"],
        c["shape_basis"],
        c["skin_weights"],
        c["parents"],
        c["skeleton_regressor"],
        faces=c.arrays.get("faces"),
        pose_basis=c.arrays.get("pose_basis"),
        use_pose_blendshapes=bool(h.get("use_pose_blendshapes", False))
        if use_pose_blendshapes is None
        else use_pose_blendshapes,
    )
    for key, value in (("n_vertices", model.n_vertices), ("n_joints", model.n_joints), ("n_shape", model.n_shape)):
        if key in h and h[key] != value:
            raise ContainerFormatError(f"model header says {key}={h[key]} but arrays give {value}")
    return model


def save_regressor(path, regressor: JointRegressor, extra: dict | None = None) -> None:
    header = {
        "kind": "joint_regressor",
        "M": regressor.n_joints,
        "N": regressor.n_vertices,
        "lambda_sum": regressor.lambda_sum,
        "solver": regressor.solver,
        "converged": regressor.converged,
        "warnings": list(regressor.warnings),
        "diagnostics": regressor.diagnostics,
    }
    header.update(extra or {})
    write_container(path, {"weights": regressor.weights}, header)


def load_regressor(path) -> JointRegressor:
    """Load a regressor container, or a dense whitespace-separated M x N text matrix."""
    path = Path(path)
    with open(path, "rb") as fh:
        is_container = fh.read(4) == b"RGFT"
    if not is_container:
        weights = np.loadtxt(path, dtype=np.float64, ndmin=2)
        return JointRegressor(weights, solver="imported")
    c = read_container(path)
    if "weights" not in c:
        raise ContainerFormatError(f"regressor file {path} has no 'weights' array")
    h = c.header
    return JointRegressor(
        c["weights"],
        lambda_sum=float(h.get("lambda_sum", 0.0)),
        solver=str(h.get("solver", "loaded")),
        converged=bool(h.get("converged", True)),
        warnings=tuple(h.get("warnings", ())),
        diagnostics=dict(h.get("diagnostics", {})),
    )


def save_poses(path, poses: dict, header: dict | None = None) -> None:
    """``poses`` maps frame id -> (BodyParams, translation)."""
    arrays = {}
    for key, (params, trans) in poses.items():
        arrays[f"{key}/pose"] = params.pose
        arrays[f"{key}/shape"] = params.shape
        arrays[f"{key}/translation"] = np.asarray(trans, dtype=np.float64)
    write_container(path, arrays, {"kind": "pose_set", **(header or {})})


def load_poses(path) -> dict:
    c = read_container(path)
    out = {}
    for name in c.keys():
        if name.endswith("/pose"):
            key = name[: -len("/pose")]
            try:
                params = BodyParams(c[f"{key}/pose"], c[f"{key}/shape"])
                trans = c[f"{key}/translation"].reshape(3)
            except KeyError as exc:
                raise ContainerFormatError(f"pose set {path}: frame {key!r} lacks {exc}") from None
            out[key] = (params, trans)
    return out


def save_joints(path, joints: dict, header: dict | None = None) -> None:
    write_container(path, {k: np.asarray(v, dtype=np.float64) for k, v in joints.items()}, {"kind": "joint_set", **(header or {})})


def load_joints(path) -> dict:
    c = read_container(path)
    out = {}
    for k in c.keys():
        v = c[k]
        if v.ndim != 2 or v.shape[1] != 3:
            raise DataError(f"joint set {path}: {k!r} is not M x 3")
        out[k] = v
    return out
