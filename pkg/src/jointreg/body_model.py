"""Parametric body mesh: shape blendshapes, forward kinematics and linear blend skinning.

Dimensions are configuration. A full SMPL model has N=6890 vertices, K=24 joints and
B=10 shape coefficients; the tests use toy models with a few dozen vertices.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import DataError, DimensionError

# Below this angle the sinc-like coefficients switch to their Taylor series.
_SERIES_ANGLE = 1e-2


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrices for one or more 3-vectors, shape (..., 3, 3)."""
    v = np.asarray(v, dtype=np.float64)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def _coefficients(theta: np.ndarray):
    """sin(t)/t, (1-cos t)/t^2 and their derivatives divided by t, elementwise."""
    t2 = theta * theta
    small = theta < _SERIES_ANGLE
    # evaluate the closed forms on a safe argument, then overwrite the small-angle entries
    ts = np.where(small, 1.0, theta)
    s, c = np.sin(ts), np.cos(ts)
    a = s / ts
    b = (1.0 - c) / ts**2
    da = (ts * c - s) / ts**3
    db = (ts * s - 2.0 * (1.0 - c)) / ts**4
    a_ser = 1.0 - t2 / 6.0 * (1.0 - t2 / 20.0 * (1.0 - t2 / 42.0))
    b_ser = 0.5 * (1.0 - t2 / 12.0 * (1.0 - t2 / 30.0 * (1.0 - t2 / 56.0)))
    da_ser = -1.0 / 3.0 + t2 / 30.0 - t2**2 / 840.0 + t2**3 / 45360.0
    db_ser = -1.0 / 12.0 + t2 / 180.0 - t2**2 / 6720.0 + t2**3 / 453600.0
    return (
        np.where(small, a_ser, a),
        np.where(small, b_ser, b),
        np.where(small, da_ser, da),
        np.where(small, db_ser, db),
    )


def rodrigues(axis_angle) -> np.ndarray:
    """Rotation matrix for an axis-angle vector (or a stack of them, shape (..., 3))."""
    v = np.asarray(axis_angle, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise DataError("axis-angle input must be finite")
    theta = np.sqrt(np.sum(v * v, axis=-1))
    a, b, _, _ = _coefficients(theta)
    k = skew(v)
    return np.eye(3) + a[..., None, None] * k + b[..., None, None] * (k @ k)


def rodrigues_jacobian(axis_angle) -> np.ndarray:
    """Derivatives dR/dv_i, shape (..., 3, 3, 3) indexed [..., i, row, col]."""
    v = np.asarray(axis_angle, dtype=np.float64)
    theta = np.sqrt(np.sum(v * v, axis=-1))
    a, b, da, db = _coefficients(theta)
    k = skew(v)
    k2 = k @ k
    e = skew(np.eye(3))  # generators [e_i]x
    out = np.empty(v.shape[:-1] + (3, 3, 3))
    for i in range(3):
        ei = e[i]
        out[..., i, :, :] = (
            (da * v[..., i])[..., None, None] * k
            + a[..., None, None] * ei
            + (db * v[..., i])[..., None, None] * k2
            + b[..., None, None] * (ei @ k + k @ ei)
        )
    return out


@dataclass(frozen=True)
class BodyParams:
    """Pose (K axis-angle vectors, joint 0 is the root) and shape coefficients."""

    pose: np.ndarray
    shape: np.ndarray

    def __post_init__(self):
        pose = np.array(self.pose, dtype=np.float64)
        shape = np.array(self.shape, dtype=np.float64)
        if pose.ndim != 2 or pose.shape[1] != 3 or shape.ndim != 1:
            raise DimensionError(f"pose must be K x 3 and shape a vector, got {pose.shape} and {shape.shape}")
        if not (np.all(np.isfinite(pose)) and np.all(np.isfinite(shape))):
            raise DataError("body parameters must be finite")
        object.__setattr__(self, "pose", pose)
        object.__setattr__(self, "shape", shape)

    @classmethod
    def zeros(cls, n_joints: int, n_shape: int) -> "BodyParams":
        return cls(np.zeros((n_joints, 3)), np.zeros(n_shape))

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.pose.ravel(), self.shape])

    @classmethod
    def from_vector(cls, vec, n_joints: int) -> "BodyParams":
        vec = np.asarray(vec, dtype=np.float64)
        return cls(vec[: 3 * n_joints].reshape(n_joints, 3), vec[3 * n_joints :])


class ForwardResult(NamedTuple):
    vertices: np.ndarray
    rest_joints: np.ndarray
    posed_joints: np.ndarray


@dataclass(frozen=True)
class _Chain:
    """Intermediate quantities of one forward pass, reused by the Jacobian."""

    shaped: np.ndarray  # N x 3, before pose blendshapes
    unposed: np.ndarray  # N x 3, after pose blendshapes
    rest_joints: np.ndarray
    local_rot: np.ndarray  # K x 3 x 3
    global_rot: np.ndarray
    global_trans: np.ndarray  # K x 3 (posed joint positions)
    bone_positions: np.ndarray  # K x N x 3, vertex i moved rigidly by bone k
    vertices: np.ndarray


@dataclass(frozen=True, eq=False)
class BodyModel:
    """Template mesh, shape basis, skinning weights, kinematic tree and skeleton regressor.

    ``pose_basis`` (9(K-1) x N x 3) is optional and only used when
    ``use_pose_blendshapes`` is set. Its input feature excludes the root rotation.
    """

    template_vertices: np.ndarray
    shape_basis: np.ndarray
    skin_weights: np.ndarray
    parents: np.ndarray
    skeleton_regressor: np.ndarray
    faces: np.ndarray | None = None
    pose_basis: np.ndarray | None = None
    use_pose_blendshapes: bool = False
    _subtree: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        t = np.array(self.template_vertices, dtype=np.float64)
        n = t.shape[0]
        if t.ndim != 2 or t.shape[1] != 3:
            raise DimensionError(f"template_vertices must be N x 3, got {t.shape}")
        s = np.array(self.shape_basis, dtype=np.float64)
        if s.ndim != 3 or s.shape[1:] != (n, 3):
            raise DimensionError(f"shape_basis must be B x {n} x 3, got {s.shape}")
        w = np.array(self.skin_weights, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] != n:
            raise DimensionError(f"skin_weights must be {n} x K, got {w.shape}")
        k = w.shape[1]
        parents = np.array(self.parents, dtype=np.int64).reshape(-1)
        if parents.shape != (k,):
            raise DimensionError(f"parents must have length {k}, got {parents.shape}")
        if k > 1 and np.any(parents[1:] >= np.arange(1, k)) or np.any(parents[1:] < 0):
            raise DataError("parents must be topologically ordered (parent[j] < j)")
        parents[0] = -1
        if np.any(w < 0) or np.any(np.abs(w.sum(axis=1) - 1.0) > 1e-9):
            raise DataError("skin_weights rows must be non-negative and sum to 1")
        r = np.array(self.skeleton_regressor, dtype=np.float64)
        if r.shape != (k, n):
            raise DimensionError(f"skeleton_regressor must be {k} x {n}, got {r.shape}")
        if np.any(r < 0) or np.any(np.abs(r.sum(axis=1) - 1.0) > 1e-9):
            raise DataError("skeleton_regressor rows must be non-negative and sum to 1")
        faces = None
        if self.faces is not None:
            faces = np.array(self.faces, dtype=np.int64)
            if faces.ndim != 2 or faces.shape[1] != 3 or np.any(faces < 0) or np.any(faces >= n):
                raise DataError("faces must be F x 3 vertex indices below N")
        pose_basis = None
        if self.pose_basis is not None:
            pose_basis = np.array(self.pose_basis, dtype=np.float64)
            if pose_basis.shape != (9 * (k - 1), n, 3):
                raise DimensionError(f"pose_basis must be {9 * (k - 1)} x {n} x 3")
        elif self.use_pose_blendshapes:
            raise DataError("use_pose_blendshapes requires a pose_basis")
        for arr in (t, s, w, parents, r, faces, pose_basis):
            if arr is not None:
                if arr.dtype.kind == "f" and not np.all(np.isfinite(arr)):
                    raise DataError("model arrays must be finite")
                arr.flags.writeable = False
        subtree = np.eye(k, dtype=bool)
        for j in range(k - 1, 0, -1):
            subtree[parents[j]] |= subtree[j]
        subtree.flags.writeable = False
        for name, arr in [
            ("template_vertices", t),
            ("shape_basis", s),
            ("skin_weights", w),
            ("parents", parents),
            ("skeleton_regressor", r),
            ("faces", faces),
            ("pose_basis", pose_basis),
            ("_subtree", subtree),
        ]:
            object.__setattr__(self, name, arr)

    @property
    def n_vertices(self) -> int:
        return self.template_vertices.shape[0]

    @property
    def n_joints(self) -> int:
        return self.skin_weights.shape[1]

    @property
    def n_shape(self) -> int:
        return self.shape_basis.shape[0]

    @property
    def n_params(self) -> int:
        return 3 * self.n_joints + self.n_shape

    @property
    def subtree(self) -> np.ndarray:
        """subtree[k, j] is True when joint j is k or a descendant of k."""
        return self._subtree

    def with_pose_blendshapes(self, enabled: bool) -> "BodyModel":
        return BodyModel(
            self.template_vertices,
            self.shape_basis,
            self.skin_weights,
            self.parents,
            self.skeleton_regressor,
            faces=self.faces,
            pose_basis=self.pose_basis,
            use_pose_blendshapes=enabled,
        )

    def check_params(self, params: BodyParams) -> None:
        if params.pose.shape != (self.n_joints, 3) or params.shape.shape != (self.n_shape,):
            raise DimensionError(
                f"params have pose {params.pose.shape} / shape {params.shape.shape}, "
                f"model expects ({self.n_joints}, 3) / ({self.n_shape},)"
            )


def shaped_template(model: BodyModel, shape) -> np.ndarray:
    """Template vertices displaced by the shape blendshapes."""
    shape = np.asarray(shape, dtype=np.float64).reshape(-1)
    if shape.shape != (model.n_shape,):
        raise DimensionError(f"expected {model.n_shape} shape coefficients, got {shape.shape[0]}")
    return model.template_vertices + np.tensordot(shape, model.shape_basis, axes=1)


def pose_feature(local_rot: np.ndarray) -> np.ndarray:
    """Pose-blendshape input: (R_j - I) flattened for non-root joints."""
    return (local_rot[1:] - np.eye(3)).reshape(-1)


def _chain(model: BodyModel, params: BodyParams) -> _Chain:
    model.check_params(params)
    shaped = shaped_template(model, params.shape)
    rest = model.skeleton_regressor @ shaped
    local = rodrigues(params.pose)
    unposed = shaped
    if model.use_pose_blendshapes:
        unposed = shaped + np.tensordot(pose_feature(local), model.pose_basis, axes=1)
    k = model.n_joints
    grot = np.empty((k, 3, 3))
    gtrans = np.empty((k, 3))
    grot[0] = local[0]
    gtrans[0] = rest[0]
    for j in range(1, k):
        p = model.parents[j]
        grot[j] = grot[p] @ local[j]
        gtrans[j] = grot[p] @ (rest[j] - rest[p]) + gtrans[p]
    bones = np.einsum("kab,knb->kna", grot, unposed[None] - rest[:, None]) + gtrans[:, None]
    vertices = np.einsum("nk,kna->na", model.skin_weights, bones)
    return _Chain(shaped, unposed, rest, local, grot, gtrans, bones, vertices)


def forward(model: BodyModel, params: BodyParams) -> ForwardResult:
    """Posed vertices, rest-pose joints and posed joints for ``params``.

    Each joint rotates its subtree about the joint's rest position; the root rotates
    about the root rest joint. There is no global translation here.
    """
    ch = _chain(model, params)
    return ForwardResult(ch.vertices, ch.rest_joints, ch.global_trans.copy())


def bone_positions(model: BodyModel, params: BodyParams) -> np.ndarray:
    """Every vertex transformed rigidly by every bone, shape (K, N, 3)."""
    return _chain(model, params).bone_positions


def forward_jacobian(model: BodyModel, params: BodyParams, return_vertices: bool = False):
    """Jacobian of the posed vertices w.r.t. (pose, shape), shape (N, 3, 3K + B).

    Column order matches ``BodyParams.to_vector``: pose components joint-major, then
    shape coefficients.
    """
    ch = _chain(model, params)
    n, k, nb = model.n_vertices, model.n_joints, model.n_shape
    w = model.skin_weights
    jac = np.empty((n, 3, 3 * k + nb))

    # A pose change at joint k rotates its whole subtree about the posed joint k.
    dlocal = rodrigues_jacobian(params.pose)  # K x 3 x 3 x 3
    sub_w = w @ model.subtree.T.astype(np.float64)  # N x K: skin weight inside subtree(k)
    sub_pos = np.einsum("nj,kj,jna->kna", w, model.subtree.astype(np.float64), ch.bone_positions)
    if model.use_pose_blendshapes:
        blend_rot = np.einsum("nk,kab->nab", w, ch.global_rot)
    for kk in range(k):
        p = model.parents[kk]
        parent_rot = ch.global_rot[p] if kk > 0 else np.eye(3)
        lever = sub_pos[kk] - sub_w[:, kk, None] * ch.global_trans[kk]
        for a in range(3):
            omega = parent_rot @ dlocal[kk, a] @ ch.local_rot[kk].T @ parent_rot.T
            col = lever @ omega.T
            if model.use_pose_blendshapes and kk > 0:
                dfeat = dlocal[kk, a].reshape(-1)
                basis = model.pose_basis[9 * (kk - 1) : 9 * kk]
                dverts = np.tensordot(dfeat, basis, axes=1)
                col = col + np.einsum("nab,nb->na", blend_rot, dverts)
            jac[:, :, 3 * kk + a] = col

    if nb:
        blend_rot = np.einsum("nk,kab->nab", w, ch.global_rot)
        djoint = np.einsum("kn,bna->bka", model.skeleton_regressor, model.shape_basis)
        dtrans = np.empty((nb, k, 3))
        dtrans[:, 0] = djoint[:, 0]
        for j in range(1, k):
            p = model.parents[j]
            dtrans[:, j] = dtrans[:, p] + (djoint[:, j] - djoint[:, p]) @ ch.global_rot[p].T
        bone_offset = dtrans - np.einsum("kac,bkc->bka", ch.global_rot, djoint)
        dverts = np.einsum("nac,bnc->bna", blend_rot, model.shape_basis)
        dverts += np.einsum("nk,bka->bna", w, bone_offset)
        jac[:, :, 3 * k :] = dverts.transpose(1, 2, 0)

    if return_vertices:
        return jac, ch.vertices
    return jac
