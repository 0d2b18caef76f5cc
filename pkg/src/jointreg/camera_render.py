"""Pinhole projection, soft silhouette rasterization and the silhouette energy.

Pixel (row i, column j) is sampled at image coordinates (x=j, y=i); integer
coordinates are pixel centres.

Each triangle covers a pixel with probability logistic(d / sigma), where d is the
signed distance from the pixel to the projected triangle (positive inside). Pixel
values are the probabilistic union 1 - prod_f (1 - c_f). There is no depth test.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import DataError, DimensionError

BEHIND_DEPTH = 1e-6
_FACE_CHUNK = 512


@dataclass(frozen=True, eq=False)
class Camera:
    """Intrinsics in pixels and a world-to-camera rigid transform (x_cam = R x + t)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray = None
    translation: np.ndarray = None

    def __post_init__(self):
        rot = np.eye(3) if self.rotation is None else np.array(self.rotation, dtype=np.float64)
        trans = np.zeros(3) if self.translation is None else np.array(self.translation, dtype=np.float64).reshape(3)
        if rot.shape != (3, 3) or not np.allclose(rot @ rot.T, np.eye(3), atol=1e-9) or np.linalg.det(rot) < 0:
            raise DataError("camera rotation must be orthonormal with determinant +1")
        if not (self.fx > 0 and self.fy > 0):
            raise DataError("focal lengths must be positive")
        if int(self.width) < 1 or int(self.height) < 1:
            raise DataError("image size must be at least 1 x 1")
        rot.flags.writeable = False
        trans.flags.writeable = False
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    def to_dict(self) -> dict:
        return {
            "fx": float(self.fx),
            "fy": float(self.fy),
            "cx": float(self.cx),
            "cy": float(self.cy),
            "width": self.width,
            "height": self.height,
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(
            d["fx"], d["fy"], d["cx"], d["cy"], d["width"], d["height"],
            d.get("rotation"), d.get("translation"),
        )

    def cropped(self, x0: int, y0: int, width: int, height: int) -> "Camera":
        """The same camera seen through a crop window whose top-left pixel is (x0, y0)."""
        return Camera(
            self.fx, self.fy, self.cx - x0, self.cy - y0, width, height, self.rotation, self.translation
        )


def to_camera_frame(camera: Camera, points) -> np.ndarray:
    return np.asarray(points, dtype=np.float64) @ camera.rotation.T + camera.translation


def project(camera: Camera, points):
    """Pixel coordinates (N x 2), depths (N,) and a behind-camera flag (N,)."""
    points = np.asarray(points, dtype=np.float64)
    if not np.all(np.isfinite(points)):
        raise DataError("points must be finite")
    pc = to_camera_frame(camera, points)
    depth = pc[:, 2]
    behind = depth <= BEHIND_DEPTH
    z = np.where(behind, 1.0, depth)
    uv = np.stack([camera.fx * pc[:, 0] / z + camera.cx, camera.fy * pc[:, 1] / z + camera.cy], axis=1)
    return uv, depth, behind


def unproject(camera: Camera, uv, depth) -> np.ndarray:
    uv = np.asarray(uv, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    pc = np.stack(
        [(uv[:, 0] - camera.cx) * depth / camera.fx, (uv[:, 1] - camera.cy) * depth / camera.fy, depth],
        axis=1,
    )
    return (pc - camera.translation) @ camera.rotation


def project_jacobian(camera: Camera, points) -> np.ndarray:
    """d(u, v)/d(x, y, z) in world coordinates, shape (N, 2, 3)."""
    pc = to_camera_frame(camera, points)
    x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
    jc = np.zeros((len(pc), 2, 3))
    jc[:, 0, 0] = camera.fx / z
    jc[:, 0, 2] = -camera.fx * x / z**2
    jc[:, 1, 1] = camera.fy / z
    jc[:, 1, 2] = -camera.fy * y / z**2
    return jc @ camera.rotation


def check_topology(faces, n_vertices: int) -> np.ndarray:
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if np.any(faces < 0) or np.any(faces >= n_vertices):
        raise DataError("face indices out of range")
    if np.any((faces[:, 0] == faces[:, 1]) | (faces[:, 1] == faces[:, 2]) | (faces[:, 0] == faces[:, 2])):
        raise DataError("degenerate triangle with repeated vertex index")
    return faces


def pixel_grid(width: int, height: int) -> np.ndarray:
    ys, xs = np.mgrid[0:height, 0:width]
    return np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)


def _visible_faces(faces, behind):
    keep = ~np.any(behind[faces], axis=1)
    if not np.all(keep):
        warnings.warn(f"dropped {np.count_nonzero(~keep)} triangle(s) behind the camera", RuntimeWarning, stacklevel=3)
    return faces[keep]


def _signed_distance(pix: np.ndarray, tri: np.ndarray):
    """Signed distance from pixels (P x 2) to triangles (F x 3 x 2), positive inside.

    Also returns, for the nearest edge, its index, the clamped edge parameter and the
    unit vector from the nearest edge point to the pixel (zero when on the edge).
    """
    best = None
    for e in range(3):
        a = tri[:, e]
        b = tri[:, (e + 1) % 3]
        ab = b - a
        ap = pix[:, None, :] - a[None]
        denom = np.einsum("fc,fc->f", ab, ab)
        u = np.clip(np.einsum("pfc,fc->pf", ap, ab) / denom, 0.0, 1.0)
        diff = ap - u[..., None] * ab[None]
        dist = np.sqrt(np.einsum("pfc,pfc->pf", diff, diff))
        cross = ab[None, :, 0] * ap[..., 1] - ab[None, :, 1] * ap[..., 0]
        if best is None:
            best = [dist, np.zeros(dist.shape, dtype=np.int64), u, diff]
            crosses = [cross]
            continue
        closer = dist < best[0]
        best[0] = np.where(closer, dist, best[0])
        best[1] = np.where(closer, e, best[1])
        best[2] = np.where(closer, u, best[2])
        best[3] = np.where(closer[..., None], diff, best[3])
        crosses.append(cross)
    c0, c1, c2 = crosses
    inside = ((c0 >= 0) & (c1 >= 0) & (c2 >= 0)) | ((c0 <= 0) & (c1 <= 0) & (c2 <= 0))
    dist, edge, u, diff = best
    with np.errstate(invalid="ignore", divide="ignore"):
        normal = np.where(dist[..., None] > 0, diff / dist[..., None], 0.0)
    sign = np.where(inside, 1.0, -1.0)
    return sign * dist, sign, edge, u, normal


def _log_uncovered(sd, sigma):
    # log(1 - logistic(x)) = -softplus(x)
    return -np.logaddexp(0.0, sd / sigma)


def render_silhouette(camera: Camera, faces, vertices, sigma: float = 1.5, backend: str = "compiled") -> np.ndarray:
    """Soft silhouette image (height x width) with values in [0, 1]."""
    return _Raster(camera, faces, vertices, sigma, backend).image()


class _Raster:
    """One soft rasterization, able to run the backward pass.

    ``backend="compiled"`` uses the numba loops; ``"numpy"`` is the vectorized
    reference and keeps per-chunk distances for the backward pass.
    """

    def __init__(self, camera, faces, vertices, sigma, backend="compiled"):
        if sigma <= 0:
            raise ValueError("sigma must be positive")
        if backend not in ("compiled", "numpy"):
            raise ValueError(f"unknown backend {backend!r}")
        self.camera = camera
        self.sigma = float(sigma)
        self.backend = backend
        self.vertices = np.asarray(vertices, dtype=np.float64)
        faces = check_topology(faces, len(self.vertices))
        self.uv, _, behind = project(camera, self.vertices)
        self.faces = np.ascontiguousarray(_visible_faces(faces, behind) if faces.size else faces)
        if backend == "compiled":
            log_empty = _kernels().log_uncovered(self.uv, self.faces, camera.width, camera.height, self.sigma)
        else:
            self.pix = pixel_grid(camera.width, camera.height)
            self.chunks = []
            log_empty = np.zeros(len(self.pix))
            for start in range(0, len(self.faces), _FACE_CHUNK):
                fidx = self.faces[start : start + _FACE_CHUNK]
                geom = _signed_distance(self.pix, self.uv[fidx])
                log_empty += _log_uncovered(geom[0], self.sigma).sum(axis=1)
                self.chunks.append((fidx, geom))
        self.empty = np.exp(log_empty)

    def image(self) -> np.ndarray:
        return (1.0 - self.empty).reshape(self.camera.height, self.camera.width)

    def backward(self, dloss_dimage) -> np.ndarray:
        """Gradient w.r.t. world vertices given dLoss/dImage."""
        # dI/dsd_f = prod_g(1 - c_g) * c_f / sigma, finite even when c_f -> 1
        upstream = np.asarray(dloss_dimage, dtype=np.float64).reshape(-1) * self.empty / self.sigma
        if self.backend == "compiled":
            cam = self.camera
            grad_uv = _kernels().backward_uv(self.uv, self.faces, cam.width, cam.height, self.sigma, upstream)
        else:
            grad_uv = np.zeros_like(self.uv)
            for fidx, (sd, sign, edge, u, normal) in self.chunks:
                g_sd = upstream[:, None] * expit(sd / self.sigma)
                # d(dist)/d(edge start) = -(1 - u) n, d(dist)/d(edge end) = -u n
                g_vec = -(g_sd * sign)[..., None] * normal
                coef = np.zeros(sd.shape + (3,))
                for e in range(3):
                    on_edge = edge == e
                    coef[..., e] += np.where(on_edge, 1.0 - u, 0.0)
                    coef[..., (e + 1) % 3] += np.where(on_edge, u, 0.0)
                corner = np.einsum("pfk,pfc->fkc", coef, g_vec)
                np.add.at(grad_uv, fidx.ravel(), corner.reshape(-1, 2))
        return np.einsum("nc,ncd->nd", grad_uv, project_jacobian(self.camera, self.vertices))


def _kernels():
    from . import _raster_kernels

    return _raster_kernels


def silhouette_loss(target, rendered) -> float:
    """Mean squared per-pixel difference between two silhouette images."""
    target = np.asarray(target, dtype=np.float64)
    rendered = np.asarray(rendered, dtype=np.float64)
    if target.shape != rendered.shape:
        raise DimensionError(f"silhouette shapes differ: {target.shape} vs {rendered.shape}")
    return float(np.mean((target - rendered) ** 2))


def silhouette_loss_and_grad(target, camera: Camera, faces, vertices, sigma: float = 1.5, backend: str = "compiled"):
    """Silhouette loss of the rendered mesh, its gradient w.r.t. world vertices, and the render."""
    target = np.asarray(target, dtype=np.float64)
    if target.shape != (camera.height, camera.width):
        raise DimensionError(f"mask is {target.shape}, camera renders {(camera.height, camera.width)}")
    raster = _Raster(camera, faces, vertices, sigma, backend)
    image = raster.image()
    resid = image - target
    loss = float(np.mean(resid**2))
    return loss, raster.backward(2.0 * resid / resid.size), image


def rasterize_hard(camera: Camera, faces, vertices) -> np.ndarray:
    """Binary coverage of pixel centres by projected triangles (boundary counts as inside)."""
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    uv, _, behind = project(camera, vertices)
    faces = faces[~np.any(behind[faces], axis=1)] if faces.size else faces
    pix = pixel_grid(camera.width, camera.height)
    covered = np.zeros(len(pix), dtype=bool)
    for start in range(0, len(faces), _FACE_CHUNK):
        tri = uv[faces[start : start + _FACE_CHUNK]]
        e = []
        for k in range(3):
            a, b = tri[:, k], tri[:, (k + 1) % 3]
            e.append((b[:, 0] - a[:, 0]) * (pix[:, None, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (pix[:, None, 0] - a[:, 0]))
        inside = ((e[0] >= 0) & (e[1] >= 0) & (e[2] >= 0)) | ((e[0] <= 0) & (e[1] <= 0) & (e[2] <= 0))
        covered |= inside.any(axis=1)
    return covered.reshape(camera.height, camera.width).astype(np.float64)
