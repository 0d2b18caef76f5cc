import hashlib

import numpy as np
import pytest

from conftest import random_params
from jointreg.body_model import BodyParams, forward
from jointreg.camera_render import render_silhouette
from jointreg.dataio import load_manifest, load_regressor
from jointreg.errors import DimensionError, RefineError
from jointreg.optim import AdamConfig, AdamState, adam_step
from jointreg.plausibility import Discriminator, disc_update, featurize
from jointreg.refine import (
    EnergyWeights,
    FrameRecord,
    RefineConfig,
    auto_weights,
    frames_from_manifest,
    joint_energy,
    refine_dataset,
    refine_frame,
)
from jointreg.regressor import JointRegressor


@pytest.fixture(scope="module")
def tiny_setup(tiny_dir):
    manifest = load_manifest(tiny_dir / "manifest.json")
    model = manifest.load_model()
    reg = load_regressor(tiny_dir / "J_std.rgft")
    return manifest, model, reg, frames_from_manifest(manifest)


def _toy_regressor(toy, rng):
    w = rng.random((4, toy.n_vertices))
    w[w < 0.8] = 0
    w[:, 0] += 1e-3
    return JointRegressor(w / w.sum(axis=1, keepdims=True))


# -- Adam ----------------------------------------------------------------------------

def test_adam_first_step_is_lr_times_sign():
    # the step is lr * |g| / (|g| + eps), so the identity holds to 1e-6 once |g| >= 1e-2
    g = np.array([3.0, -0.02, 250.0, -7.0])
    _, x = adam_step(AdamState.zeros(4), np.zeros(4), g, AdamConfig(lr=1e-2))
    np.testing.assert_allclose(-x, 1e-2 * np.sign(g), rtol=1e-6)


def test_adam_zero_gradient_leaves_parameters():
    x0 = np.array([1.0, -2.0])
    state, x = AdamState.zeros(2), x0
    for _ in range(50):
        state, x = adam_step(state, x, np.zeros(2), AdamConfig())
    assert np.array_equal(x, x0)


def test_adam_scalar_quadratic():
    state, x = AdamState.zeros(1), np.array([1.0])
    for _ in range(1000):
        state, x = adam_step(state, x, 2 * x, AdamConfig(lr=1e-2))
    assert abs(x[0]) < 1e-3


def test_adam_validation():
    with pytest.raises(ValueError):
        AdamConfig(lr=0)
    with pytest.raises(ValueError):
        AdamConfig(beta1=1.0)
    with pytest.raises(DimensionError):
        adam_step(AdamState.zeros(2), np.zeros(3), np.zeros(3), AdamConfig())


# -- joint energy and weighting --------------------------------------------------------

def test_joint_energy_zero_at_current_joints(toy):
    rng = np.random.default_rng(0)
    reg = _toy_regressor(toy, rng)
    p = random_params(rng, toy)
    t = rng.normal(size=3)
    gt = reg(forward(toy, p).vertices) + t
    e, g, gt_grad = joint_energy(reg, toy, p, t, gt)
    assert e < 1e-28 and np.abs(g).max() < 1e-13 and np.abs(gt_grad).max() < 1e-13


def test_joint_energy_translation_equivariance(toy):
    rng = np.random.default_rng(1)
    reg = _toy_regressor(toy, rng)
    p = random_params(rng, toy)
    gt = rng.normal(size=(4, 3))
    t = rng.normal(size=3)
    shift = np.array([0.3, -1.2, 2.0])
    e1 = joint_energy(reg, toy, p, t, gt)[0]
    e2 = joint_energy(reg, toy, p, t + shift, gt + shift)[0]
    assert e2 == pytest.approx(e1, rel=1e-12)


def test_joint_energy_gradient_fd(toy):
    rng = np.random.default_rng(2)
    reg = _toy_regressor(toy, rng)
    for _ in range(5):
        p = random_params(rng, toy)
        t = rng.normal(scale=0.1, size=3)
        gt = rng.normal(scale=0.3, size=(4, 3))
        _, g, g_t = joint_energy(reg, toy, p, t, gt)
        x = np.concatenate([p.to_vector(), t])
        full = np.concatenate([g, g_t])

        def energy(v):
            return joint_energy(reg, toy, BodyParams.from_vector(v[:-3], toy.n_joints), v[-3:], gt)[0]

        h = 1e-6
        for k in range(x.size):
            e = np.zeros_like(x)
            e[k] = h
            fd = (energy(x + e) - energy(x - e)) / (2 * h)
            assert abs(full[k] - fd) <= 1e-5 * max(abs(fd), 1e-6)


def test_joint_energy_dimension_errors(toy):
    reg = _toy_regressor(toy, np.random.default_rng(3))
    with pytest.raises(DimensionError):
        joint_energy(reg, toy, BodyParams.zeros(5, 2), np.zeros(3), np.zeros((3, 3)))


def test_auto_weights_examples():
    w = auto_weights({"joint": 2.0, "silhouette": 2.0, "adv": 2.0})
    assert (w.joint, w.silhouette, w.adv) == pytest.approx((1.0, 1.0, 1.0))
    raw = {"joint": 4.0, "silhouette": 1.0, "adv": 1.0}
    w = auto_weights(raw)
    for k in raw:
        assert getattr(w, k) * raw[k] == pytest.approx(1.0, rel=1e-11)
    w = auto_weights({"joint": 4.0, "silhouette": 9.0, "adv": 1.0}, {"joint": True, "silhouette": False, "adv": True})
    assert w.silhouette == 0.0
    assert w.joint * 4.0 == pytest.approx(w.adv * 1.0, rel=1e-11)
    assert auto_weights({"joint": 0.0, "silhouette": 0.0, "adv": 0.0}) == EnergyWeights(1.0, 1.0, 1.0)
    with pytest.raises(ValueError):
        EnergyWeights(-1.0)


# -- refine_frame --------------------------------------------------------------------

def test_fixed_point_trace_is_flat(toy, camera):
    rng = np.random.default_rng(4)
    reg = _toy_regressor(toy, rng)
    p = random_params(rng, toy, 0.3)
    t = np.array([0.02, -0.01, 0.03])
    verts = forward(toy, p).vertices + t
    mask = render_silhouette(camera, toy.faces, verts, 1.5)
    frame = FrameRecord("f", p, t, reg(verts), mask, camera)
    cfg = RefineConfig(iterations=20, use_adv=False)
    res = refine_frame(frame, toy, reg, None, cfg)
    assert len(res.trace) == 20
    assert max(abs(e - res.initial_energy) for e in res.trace) < 1e-8
    np.testing.assert_allclose(res.params.pose, p.pose, atol=1e-8)


def test_noisy_frame_joint_energy_drops(toy, camera):
    rng = np.random.default_rng(5)
    reg = _toy_regressor(toy, rng)
    true = random_params(rng, toy, 0.3)
    t = np.zeros(3)
    verts = forward(toy, true).vertices
    from jointreg.camera_render import rasterize_hard

    noisy = BodyParams(true.pose + rng.normal(scale=0.05, size=true.pose.shape), true.shape)
    frame = FrameRecord("f", noisy, t, reg(verts), rasterize_hard(camera, toy.faces, verts), camera)
    disc = Discriminator.create(toy.n_joints, toy.n_shape, seed=0)
    res = refine_frame(frame, toy, reg, disc, RefineConfig())
    assert res.status == "ok"
    assert res.final_raw["joint"] < 0.1 * res.initial_raw["joint"]
    # the returned iterate carries the lowest recorded energy
    assert res.final_energy == min([res.initial_energy] + res.trace)


def test_adv_only_moves_toward_real_cluster(toy):
    rng = np.random.default_rng(6)
    k, b = toy.n_joints, toy.n_shape
    real = np.stack([featurize(BodyParams(rng.normal(scale=0.1, size=(k, 3)), rng.normal(scale=0.1, size=b))) for _ in range(64)])
    fake = np.stack([featurize(BodyParams(0.8 + rng.normal(scale=0.1, size=(k, 3)), 1 + rng.normal(scale=0.1, size=b))) for _ in range(64)])
    disc = Discriminator.create(k, b, seed=6)
    state = None
    for _ in range(500):
        disc, state, _ = disc_update(disc, real, fake, state)
    start = BodyParams(np.full((k, 3), 0.8), np.ones(b))
    frame = FrameRecord("f", start, np.zeros(3), np.zeros((4, 3)))
    cfg = RefineConfig(iterations=100, use_joint=False, use_silhouette=False)
    res = refine_frame(frame, toy, _toy_regressor(toy, rng), disc, cfg)
    centre = real.mean(axis=0)
    assert np.linalg.norm(featurize(res.params) - centre) < np.linalg.norm(featurize(start) - centre)


def test_non_finite_frame_is_marked_failed(toy, camera):
    rng = np.random.default_rng(7)
    reg = _toy_regressor(toy, rng)
    p = random_params(rng, toy)
    gt = np.full((4, 3), np.nan)
    frame = FrameRecord("bad", p, np.zeros(3), gt)
    res = refine_frame(frame, toy, reg, None, RefineConfig(use_silhouette=False, use_adv=False))
    assert res.status == "failed" and res.params is p


def test_missing_inputs_rejected(toy):
    reg = _toy_regressor(toy, np.random.default_rng(8))
    frame = FrameRecord("f", BodyParams.zeros(5, 2), np.zeros(3), np.zeros((4, 3)))
    with pytest.raises(DimensionError):
        refine_frame(frame, toy, reg, None, RefineConfig(use_adv=False))
    with pytest.raises(DimensionError):
        refine_frame(frame, toy, reg, None, RefineConfig(use_silhouette=False))
    with pytest.raises(ValueError):
        RefineConfig(mode="parallel")


# -- refine_dataset ------------------------------------------------------------------

def _digest(result):
    h = hashlib.sha256()
    for key in sorted(result.poses):
        params, trans = result.poses[key]
        h.update(params.pose.tobytes() + params.shape.tobytes() + trans.tobytes())
    h.update(result.discriminator.flat_params().tobytes())
    return h.hexdigest()


def test_empty_dataset(toy):
    out = refine_dataset([], toy, _toy_regressor(toy, np.random.default_rng(9)), RefineConfig())
    assert out.poses == {} and out.report["frames"] == 0


def test_dataset_determinism_and_energy_decrease(tiny_setup):
    manifest, model, reg, frames = tiny_setup
    before = reg.weights.tobytes()
    cfg = RefineConfig(iterations=15, sigma=manifest.sigma, seed=3)
    a = refine_dataset(frames, model, reg, cfg)
    b = refine_dataset(frames, model, reg, cfg)
    assert _digest(a) == _digest(b)
    assert reg.weights.tobytes() == before
    assert a.report["mean_final_energy"] < a.report["mean_initial_energy"]
    assert len(a.report["discriminator_losses"]) == len(frames)
    assert all(len(r.trace) == 15 for r in a.results)


def test_batched_mode_is_flagged(tiny_setup):
    manifest, model, reg, frames = tiny_setup
    cfg = RefineConfig(iterations=3, sigma=manifest.sigma, mode="batched", n_jobs=2)
    out = refine_dataset(frames[:4], model, reg, cfg)
    assert out.report["mode"] == "batched" and out.report["deviation"]
    serial = refine_dataset(frames[:4], model, reg, RefineConfig(iterations=3, sigma=manifest.sigma, mode="batched"))
    assert _digest(out) == _digest(serial)


def test_failures_are_skipped_then_escalated(tiny_setup):
    manifest, model, reg, frames = tiny_setup
    cfg = RefineConfig(iterations=2, sigma=manifest.sigma, max_failure_fraction=0.1)

    def corrupt(f):
        return FrameRecord(f.id, f.params, f.translation, np.full_like(f.gt_joints, np.nan), f.mask, f.camera)

    one_bad = [corrupt(frames[0])] + frames[1:]
    out = refine_dataset(one_bad, model, reg, cfg)
    assert out.report["failures"] == [frames[0].id]
    assert out.poses[frames[0].id][0] is frames[0].params
    with pytest.raises(RefineError):
        refine_dataset([corrupt(f) for f in frames[:2]] + frames[2:], model, reg, cfg)
