"""Compiled pixel-by-triangle loops for the soft rasterizer.

These mirror ``camera_render._signed_distance`` exactly; the numpy path stays as the
reference implementation and the tests compare the two.
"""

import math

import numpy as np
from numba import njit


@njit(cache=True, inline="always")
def _pair(px, py, tri):
    """Signed distance to one triangle plus nearest-edge data (edge, u, nx, ny)."""
    best = np.inf
    edge = 0
    bu = 0.0
    bdx = 0.0
    bdy = 0.0
    pos = 0
    neg = 0
    for e in range(3):
        ax = tri[e, 0]
        ay = tri[e, 1]
        ex = tri[(e + 1) % 3, 0] - ax
        ey = tri[(e + 1) % 3, 1] - ay
        apx = px - ax
        apy = py - ay
        u = (apx * ex + apy * ey) / (ex * ex + ey * ey)
        if u < 0.0:
            u = 0.0
        elif u > 1.0:
            u = 1.0
        dx = apx - u * ex
        dy = apy - u * ey
        dist = math.sqrt(dx * dx + dy * dy)
        if e == 0 or dist < best:
            best = dist
            edge = e
            bu = u
            bdx = dx
            bdy = dy
        cross = ex * apy - ey * apx
        if cross >= 0.0:
            pos += 1
        if cross <= 0.0:
            neg += 1
    sign = 1.0 if (pos == 3 or neg == 3) else -1.0
    if best > 0.0:
        nx = bdx / best
        ny = bdy / best
    else:
        nx = 0.0
        ny = 0.0
    return sign * best, sign, edge, bu, nx, ny


@njit(cache=True)
def log_uncovered(uv, faces, width, height, sigma):
    """sum_f log(1 - logistic(sd_f / sigma)) for every pixel, row-major."""
    out = np.zeros(width * height)
    tri = np.empty((3, 2))
    for f in range(faces.shape[0]):
        for k in range(3):
            tri[k, 0] = uv[faces[f, k], 0]
            tri[k, 1] = uv[faces[f, k], 1]
        for y in range(height):
            for x in range(width):
                sd, _, _, _, _, _ = _pair(float(x), float(y), tri)
                z = sd / sigma
                # -softplus(z), stable for both signs
                if z > 0:
                    out[y * width + x] -= z + math.log1p(math.exp(-z))
                else:
                    out[y * width + x] -= math.log1p(math.exp(z))
    return out


@njit(cache=True)
def backward_uv(uv, faces, width, height, sigma, upstream):
    """Accumulate upstream[p] * logistic(sd/sigma) * d(sd)/d(uv) over all pairs."""
    grad = np.zeros(uv.shape)
    tri = np.empty((3, 2))
    for f in range(faces.shape[0]):
        for k in range(3):
            tri[k, 0] = uv[faces[f, k], 0]
            tri[k, 1] = uv[faces[f, k], 1]
        acc = np.zeros((3, 2))
        for y in range(height):
            for x in range(width):
                up = upstream[y * width + x]
                if up == 0.0:
                    continue
                sd, sign, edge, u, nx, ny = _pair(float(x), float(y), tri)
                z = sd / sigma
                if z >= 0:
                    cov = 1.0 / (1.0 + math.exp(-z))
                else:
                    ez = math.exp(z)
                    cov = ez / (1.0 + ez)
                g = -up * cov * sign
                a = edge
                b = (edge + 1) % 3
                acc[a, 0] += g * (1.0 - u) * nx
                acc[a, 1] += g * (1.0 - u) * ny
                acc[b, 0] += g * u * nx
                acc[b, 1] += g * u * ny
        for k in range(3):
            grad[faces[f, k], 0] += acc[k, 0]
            grad[faces[f, k], 1] += acc[k, 1]
    return grad
