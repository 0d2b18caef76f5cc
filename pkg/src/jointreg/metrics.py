"""Joint-position error metrics and the regressor comparison report.

Joint sets are in metres internally; every reported error is in millimetres.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .body_model import BodyModel, BodyParams, forward
from .errors import DegeneracyError, DimensionError

MM = 1000.0


@dataclass(frozen=True)
class SimilarityTransform:
    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("scale must be positive")

    def apply(self, points) -> np.ndarray:
        return self.scale * np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation


def _pair(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[1] != 3:
        raise DimensionError(f"joint sets must both be M x 3, got {pred.shape} and {gt.shape}")
    return pred, gt


def mpjpe(pred, gt, root_align: bool = False, root: int = 0) -> float:
    """Mean per-joint Euclidean error in mm; inputs in metres."""
    pred, gt = _pair(pred, gt)
    if root_align:
        pred = pred - pred[root]
        gt = gt - gt[root]
    return float(np.mean(np.linalg.norm(pred - gt, axis=1)) * MM)


def procrustes(pred, gt) -> SimilarityTransform:
    """Similarity transform minimizing sum ||s R pred + t - gt||^2, reflections excluded."""
    pred, gt = _pair(pred, gt)
    if len(gt) < 3:
        raise DegeneracyError("procrustes needs at least 3 joints")
    mu_p, mu_g = pred.mean(axis=0), gt.mean(axis=0)
    p, g = pred - mu_p, gt - mu_g
    if np.linalg.svd(g, compute_uv=False)[1] < 1e-12:
        raise DegeneracyError("ground-truth joints are collinear or coincident")
    var_p = np.sum(p**2)
    if var_p < 1e-24:
        raise DegeneracyError("predicted joints are coincident")
    u, sv, vt = np.linalg.svd(g.T @ p)
    d = np.ones(3)
    d[2] = np.sign(np.linalg.det(u @ vt)) or 1.0
    rot = (u * d) @ vt
    scale = float(np.sum(sv * d) / var_p)
    return SimilarityTransform(scale, rot, mu_g - scale * rot @ mu_p)


def pa_mpjpe(pred, gt) -> float:
    pred, gt = _pair(pred, gt)
    return mpjpe(procrustes(pred, gt).apply(pred), gt)


def _frame_vertices(model, item):
    """Vertices from (params, translation), params alone, or a vertex array."""
    if isinstance(item, BodyParams):
        return forward(model, item).vertices
    if isinstance(item, tuple):
        params, trans = item
        return forward(model, params).vertices + np.asarray(trans, dtype=np.float64)
    return np.asarray(item, dtype=np.float64)


def evaluate_regressors(frames, regressors: dict, model: BodyModel | None = None, root: int = 0) -> dict:
    """Mean MPJPE (raw and root-aligned) and PA-MPJPE per named regressor.

    ``frames`` holds (source, gt_joints) pairs where source is a vertex array, a
    BodyParams or a (BodyParams, translation) tuple; parameters need ``model``.
    Per-frame errors are sorted before averaging so the result does not depend
    on frame order, bit for bit.
    """
    frames = list(frames)
    verts = [_frame_vertices(model, src) for src, _ in frames]
    rows = {}
    for name, reg in regressors.items():
        w = getattr(reg, "weights", reg)
        errs = np.array([
            (mpjpe(w @ v, gt), mpjpe(w @ v, gt, True, root), pa_mpjpe(w @ v, gt))
            for v, (_, gt) in zip(verts, frames)
        ]).reshape(-1, 3)
        mean = np.sort(errs, axis=0).mean(axis=0) if len(errs) else np.full(3, np.nan)
        rows[name] = {"mpjpe": float(mean[0]), "mpjpe_root": float(mean[1]), "pa_mpjpe": float(mean[2]),
                      "frames": len(frames)}
    return rows


def format_table(rows: dict, method: str = "estimate") -> tuple:
    """(tab-separated text, aligned text): one row per method, regressor column groups."""
    names = list(rows)
    cols = ("mpjpe", "mpjpe_root", "pa_mpjpe")
    header = ["method"] + [f"{n}:{c}" for n in names for c in cols]
    values = [method] + [f"{rows[n][c]:.2f}" for n in names for c in cols]
    tsv = "\t".join(header) + "\n" + "\t".join(values) + "\n"
    widths = [max(len(h), len(v)) for h, v in zip(header, values)]
    buf = io.StringIO()
    buf.write("  ".join(h.rjust(w) for h, w in zip(header, widths)) + "\n")
    buf.write("  ".join(v.rjust(w) for v, w in zip(values, widths)) + "\n")
    return tsv, buf.getvalue()
