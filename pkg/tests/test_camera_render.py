import numpy as np
import pytest

from jointreg.camera_render import (
    Camera,
    project,
    project_jacobian,
    rasterize_hard,
    render_silhouette,
    silhouette_loss,
    silhouette_loss_and_grad,
    unproject,
)
from jointreg.errors import DataError, DimensionError


def _cam(**kw):
    base = dict(fx=100.0, fy=120.0, cx=31.5, cy=23.5, width=64, height=48)
    base.update(kw)
    return Camera(**base)


def _plane_triangle(cam, pixels, depth=3.0):
    """World points (camera frame = world) that project onto the given pixel triangle."""
    return unproject(cam, np.asarray(pixels, dtype=np.float64), np.full(len(pixels), depth))


def test_camera_validation():
    with pytest.raises(DataError):
        _cam(fx=0.0)
    with pytest.raises(DataError):
        _cam(width=0)
    with pytest.raises(DataError):
        _cam(rotation=np.diag([1.0, 1.0, -1.0]))
    cam = _cam(rotation=np.diag([1.0, -1.0, -1.0]), translation=[0.1, 0.2, 3.0])
    again = Camera.from_dict(cam.to_dict())
    assert again.to_dict() == cam.to_dict()


def test_projection_axis_and_focal_scaling():
    cam = _cam()
    uv, depth, behind = project(cam, [[0.0, 0.0, 2.5]])
    np.testing.assert_allclose(uv[0], [cam.cx, cam.cy])
    assert depth[0] == 2.5 and not behind[0]
    p = [[0.3, -0.2, 2.0]]
    u1 = project(cam, p)[0][0, 0] - cam.cx
    u2 = project(_cam(fx=200.0), p)[0][0, 0] - cam.cx
    assert u2 == pytest.approx(2 * u1, rel=1e-15)


def test_behind_camera_flag():
    _, depth, behind = project(_cam(), [[0.0, 0.0, -1.0], [0.0, 0.0, 1e-7], [0.0, 0.0, 1.0]])
    assert behind.tolist() == [True, True, False]


def test_unproject_round_trip():
    rng = np.random.default_rng(0)
    cam = _cam(rotation=np.diag([1.0, -1.0, -1.0]), translation=[0.1, -0.3, 4.0])
    pts = rng.uniform(-1, 1, size=(100, 3))
    uv, depth, _ = project(cam, pts)
    np.testing.assert_allclose(unproject(cam, uv, depth), pts, atol=1e-10)


def test_project_jacobian_fd():
    rng = np.random.default_rng(1)
    cam = _cam(rotation=np.diag([1.0, -1.0, -1.0]), translation=[0.0, 0.0, 3.0])
    pts = rng.uniform(-0.5, 0.5, size=(10, 3))
    jac = project_jacobian(cam, pts)
    h = 1e-6
    for c in range(3):
        e = np.zeros(3)
        e[c] = h
        fd = (project(cam, pts + e)[0] - project(cam, pts - e)[0]) / (2 * h)
        np.testing.assert_allclose(jac[:, :, c], fd, rtol=1e-7, atol=1e-6)


def test_cropped_camera_shifts_pixels():
    cam = _cam()
    crop = cam.cropped(10, 5, 20, 20)
    p = [[0.1, 0.05, 2.0]]
    np.testing.assert_allclose(project(crop, p)[0], project(cam, p)[0] - [10, 5])


def test_saturation_for_large_triangle():
    # identity extrinsics place the triangle directly in pixel space
    plain = Camera(40.0, 40.0, 15.5, 15.5, 32, 32)
    verts = _plane_triangle(plain, [[-200.0, -200.0], [300.0, -200.0], [-200.0, 300.0]])
    img = render_silhouette(plain, [[0, 1, 2]], verts, sigma=0.5)
    assert img.min() > 0.99
    small = _plane_triangle(plain, [[2.0, 2.0], [6.0, 2.0], [2.0, 6.0]])
    img = render_silhouette(plain, [[0, 1, 2]], small, sigma=0.5)
    assert img[31, 31] < 0.01 and img[3, 3] > 0.8


def test_edge_pixel_has_half_coverage():
    plain = Camera(40.0, 40.0, 15.5, 15.5, 32, 32)
    # the pixel centre (10, 10) lies on the edge from (4, 10) to (20, 10)
    verts = _plane_triangle(plain, [[4.0, 10.0], [20.0, 10.0], [12.0, 25.0]])
    img = render_silhouette(plain, [[0, 1, 2]], verts, sigma=1.0)
    assert img[10, 10] == pytest.approx(0.5, abs=1e-12)


def test_union_bounds_and_monotonicity():
    plain = Camera(40.0, 40.0, 15.5, 15.5, 32, 32)
    a = _plane_triangle(plain, [[2.0, 2.0], [12.0, 3.0], [4.0, 14.0]])
    b = _plane_triangle(plain, [[18.0, 16.0], [29.0, 20.0], [20.0, 30.0]])
    verts = np.vstack([a, b])
    ia = render_silhouette(plain, [[0, 1, 2]], verts)
    ib = render_silhouette(plain, [[3, 4, 5]], verts)
    iu = render_silhouette(plain, [[0, 1, 2], [3, 4, 5]], verts)
    assert np.all(iu >= np.maximum(ia, ib) - 1e-15)
    assert np.all(iu <= ia + ib + 1e-15)
    assert np.all((iu >= 0) & (iu <= 1))


def test_empty_topology_renders_zeros():
    plain = Camera(40.0, 40.0, 15.5, 15.5, 16, 12)
    img = render_silhouette(plain, np.zeros((0, 3), dtype=int), np.zeros((3, 3)) + [0, 0, 2])
    assert img.shape == (12, 16) and not img.any()


def test_topology_validation():
    plain = Camera(40.0, 40.0, 15.5, 15.5, 16, 16)
    verts = np.zeros((3, 3)) + [0, 0, 2]
    with pytest.raises(DataError):
        render_silhouette(plain, [[0, 1, 3]], verts)
    with pytest.raises(DataError):
        render_silhouette(plain, [[0, 1, 1]], verts)


def test_behind_camera_triangles_dropped_with_warning():
    plain = Camera(40.0, 40.0, 15.5, 15.5, 16, 16)
    verts = np.array([[0.0, 0.0, -1.0], [0.1, 0.0, -1.0], [0.0, 0.1, -1.0]])
    with pytest.warns(RuntimeWarning, match="behind the camera"):
        img = render_silhouette(plain, [[0, 1, 2]], verts)
    assert not img.any()


def _body_renders(toy, camera, sigma, count=5):
    from jointreg.body_model import forward

    from conftest import random_params

    rng = np.random.default_rng(2)
    for _ in range(count):
        verts = forward(toy, random_params(rng, toy)).vertices + rng.uniform(-0.1, 0.1, 3)
        yield verts, render_silhouette(camera, toy.faces, verts, sigma=sigma), rasterize_hard(camera, toy.faces, verts) > 0


@pytest.mark.xfail(strict=True, reason=(
    "closed meshes fold at the silhouette outline, so two faces share each outline edge and the "
    "union 1-(1-c)^2 exceeds 0.5 up to ~0.09 px outside it; about 0.5% of a 64x64 image"))
def test_hard_limit_consistency_closed_mesh(toy, camera):
    for _, soft, hard in _body_renders(toy, camera, 0.1):
        assert np.mean((soft >= 0.5) == hard) >= 0.999


def test_hard_limit_mismatch_confined_to_outline_band(toy, camera):
    from jointreg.camera_render import _signed_distance

    sigma = 0.1
    for verts, soft, hard in _body_renders(toy, camera, sigma):
        uv = project(camera, verts)[0]
        for y, x in np.argwhere((soft >= 0.5) != hard):
            sd = _signed_distance(np.array([[x, y]], dtype=np.float64), uv[toy.faces])[0][0]
            k = np.count_nonzero(sd > -10 * sigma)
            # outside every face, yet k near faces push the union past 0.5
            assert sd.max() < 0 and 1 - (1 - 1 / (1 + np.exp(-sd.max() / sigma))) ** k >= 0.5


def test_hard_limit_converges_as_sigma_shrinks(toy, camera):
    rates = [np.mean([np.mean((soft >= 0.5) != hard) for _, soft, hard in _body_renders(toy, camera, s, 3)])
             for s in (0.1, 0.01, 0.001)]
    assert rates[0] > rates[1] > rates[2] and rates[2] < 1e-3


def test_hard_limit_consistency_triangle_soup():
    rng = np.random.default_rng(5)
    plain = Camera(40.0, 40.0, 31.5, 31.5, 64, 64)
    for _ in range(5):
        pix = rng.uniform(0, 63, size=(24, 2))
        verts = _plane_triangle(plain, pix, depth=rng.uniform(2, 4))
        faces = np.arange(24).reshape(8, 3)
        soft = render_silhouette(plain, faces, verts, sigma=0.1) >= 0.5
        hard = rasterize_hard(plain, faces, verts) > 0
        assert np.mean(soft == hard) >= 0.999


def test_backends_agree(toy, camera):
    from jointreg.body_model import forward

    from conftest import random_params

    rng = np.random.default_rng(3)
    verts = forward(toy, random_params(rng, toy)).vertices
    target = rasterize_hard(camera, toy.faces, forward(toy, random_params(rng, toy)).vertices)
    a = silhouette_loss_and_grad(target, camera, toy.faces, verts, backend="compiled")
    b = silhouette_loss_and_grad(target, camera, toy.faces, verts, backend="numpy")
    assert a[0] == pytest.approx(b[0], rel=1e-12)
    np.testing.assert_allclose(a[1], b[1], atol=1e-14)
    np.testing.assert_allclose(a[2], b[2], atol=1e-14)


def test_loss_examples():
    ones, zeros = np.ones((6, 7)), np.zeros((6, 7))
    assert silhouette_loss(ones, zeros) == 1.0
    assert silhouette_loss(ones, ones) == 0.0
    with pytest.raises(DimensionError):
        silhouette_loss(ones, np.ones((7, 6)))


def test_matching_target_has_zero_loss_and_gradient(toy, camera):
    from jointreg.body_model import BodyParams, forward

    verts = forward(toy, BodyParams.zeros(toy.n_joints, toy.n_shape)).vertices
    target = render_silhouette(camera, toy.faces, verts)
    loss, grad, _ = silhouette_loss_and_grad(target, camera, toy.faces, verts)
    assert loss == 0.0 and not grad.any()
    with pytest.raises(DimensionError):
        silhouette_loss_and_grad(target[:-1], camera, toy.faces, verts)


@pytest.mark.parametrize("backend", ["compiled", "numpy"])
def test_gradient_fd(toy, camera, backend):
    from jointreg.body_model import forward

    from conftest import random_params

    rng = np.random.default_rng(4)
    verts = forward(toy, random_params(rng, toy)).vertices
    target = rasterize_hard(camera, toy.faces, forward(toy, random_params(rng, toy)).vertices)
    _, grad, _ = silhouette_loss_and_grad(target, camera, toy.faces, verts, backend=backend)
    h = 1e-4
    for i, c in zip(rng.choice(toy.n_vertices, 15), rng.integers(0, 3, 15)):
        e = np.zeros_like(verts)
        e[i, c] = h
        fd = (silhouette_loss_and_grad(target, camera, toy.faces, verts + e, backend=backend)[0]
              - silhouette_loss_and_grad(target, camera, toy.faces, verts - e, backend=backend)[0]) / (2 * h)
        assert abs(grad[i, c] - fd) <= 1e-3 * abs(fd) + 1e-9


def test_descent_on_shifted_triangle():
    plain = Camera(40.0, 40.0, 15.5, 15.5, 32, 32)
    tri = _plane_triangle(plain, [[6.0, 6.0], [18.0, 7.0], [8.0, 20.0]])
    target = render_silhouette(plain, [[0, 1, 2]], _plane_triangle(plain, [[10.0, 9.0], [22.0, 10.0], [12.0, 23.0]]), 0.5)
    offset = np.zeros(3)
    losses = []
    for _ in range(20):
        loss, grad, _ = silhouette_loss_and_grad(target, plain, [[0, 1, 2]], tri + offset)
        losses.append(loss)
        offset -= 0.05 * grad.sum(axis=0)  # rigid translation of the whole triangle
    assert all(b < a for a, b in zip(losses, losses[1:]))
