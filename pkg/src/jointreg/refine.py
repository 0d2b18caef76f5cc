"""Per-frame refinement of body parameters against joints, silhouette and plausibility.

The optimized vector is (pose, shape, translation). The three energies are weighted
once, at the initial parameters, so that they start at comparable magnitudes; Adam
then runs a fixed number of steps and the lowest-energy iterate is returned.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .body_model import BodyModel, BodyParams, forward_jacobian
from .camera_render import Camera, silhouette_loss_and_grad
from .errors import DimensionError, RefineError
from .optim import AdamConfig, AdamState, adam_step
from .plausibility import (
    Discriminator,
    ReplayBuffer,
    adv_energy,
    disc_update,
    featurize,
)
from .regressor import JointRegressor

logger = logging.getLogger(__name__)

TERMS = ("joint", "silhouette", "adv")


@dataclass(frozen=True)
class RefineConfig:
    iterations: int = 100
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    sigma: float = 1.5
    use_joint: bool = True
    use_silhouette: bool = True
    use_adv: bool = True
    seed: int = 0
    disc_hidden: tuple = (64, 64)
    disc_include_shape: bool = True
    replay_size: int = 1024
    disc_batch: int = 32
    disc_lr: float = 1e-3
    mode: str = "sequential"
    n_jobs: int = 1
    max_failure_fraction: float = 0.1

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.mode not in ("sequential", "batched"):
            raise ValueError("mode must be 'sequential' or 'batched'")
        object.__setattr__(self, "disc_hidden", tuple(self.disc_hidden))
        self.adam  # validates rates and betas

    @property
    def adam(self) -> AdamConfig:
        return AdamConfig(self.lr, self.beta1, self.beta2, self.eps)

    @property
    def enabled(self) -> dict:
        return {"joint": self.use_joint, "silhouette": self.use_silhouette, "adv": self.use_adv}


@dataclass
class FrameRecord:
    id: str
    params: BodyParams
    translation: np.ndarray
    gt_joints: np.ndarray
    mask: np.ndarray | None = None
    camera: Camera | None = None

    def __post_init__(self):
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.gt_joints = np.asarray(self.gt_joints, dtype=np.float64)
        if self.gt_joints.ndim != 2 or self.gt_joints.shape[1] != 3:
            raise DimensionError(f"frame {self.id}: gt joints must be M x 3")
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=np.float64)
            if self.camera is not None and self.mask.shape != (self.camera.height, self.camera.width):
                raise DimensionError(f"frame {self.id}: mask shape {self.mask.shape} does not match camera")


@dataclass(frozen=True)
class EnergyWeights:
    joint: float = 1.0
    silhouette: float = 1.0
    adv: float = 1.0

    def __post_init__(self):
        for name in TERMS:
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"energy weight {name} must be finite and non-negative")

    def as_dict(self) -> dict:
        return asdict(self)


def joint_energy(regressor: JointRegressor, model: BodyModel, params: BodyParams, translation, gt_joints,
                 jacobian=None):
    """Mean squared joint distance and its gradients w.r.t. (pose, shape) and translation."""
    gt = np.asarray(gt_joints, dtype=np.float64)
    if gt.shape != (regressor.n_joints, 3) or regressor.n_vertices != model.n_vertices:
        raise DimensionError("regressor, model and gt joints disagree in size")
    if jacobian is None:
        jacobian = forward_jacobian(model, params, return_vertices=True)
    jac, verts = jacobian
    resid = gt - (regressor.weights @ verts + np.asarray(translation, dtype=np.float64))
    m = gt.shape[0]
    energy = float(np.sum(resid**2) / m)
    d_verts = -(2.0 / m) * (regressor.weights.T @ resid)  # N x 3
    grad = np.einsum("nc,ncp->p", d_verts, jac)
    grad_t = -(2.0 / m) * resid.sum(axis=0)
    return energy, grad, grad_t


def auto_weights(raw: dict, enabled: dict | None = None) -> EnergyWeights:
    """Scale each enabled term to the median of the enabled raw energies."""
    enabled = enabled or {k: True for k in TERMS}
    active = [k for k in TERMS if enabled.get(k, False)]
    values = [raw[k] for k in active]
    if not active:
        return EnergyWeights(0.0, 0.0, 0.0)
    if all(v == 0 for v in values):
        return EnergyWeights(**{k: (1.0 if k in active else 0.0) for k in TERMS})
    median = float(np.median(values))
    return EnergyWeights(**{k: (median / (raw[k] + 1e-12) if k in active else 0.0) for k in TERMS})


class _FrameObjective:
    """Energies and gradients over the stacked vector (pose, shape, translation)."""

    def __init__(self, frame, model, regressor, disc, config):
        self.frame, self.model, self.regressor, self.disc, self.config = frame, model, regressor, disc, config
        self.n_body = model.n_params
        if config.use_silhouette and (frame.mask is None or frame.camera is None or model.faces is None):
            raise DimensionError(f"frame {frame.id}: silhouette term needs a mask, a camera and mesh faces")
        if config.use_adv and disc is None:
            raise DimensionError("adversarial term needs a discriminator")

    def split(self, x):
        return BodyParams.from_vector(x[: self.n_body], self.model.n_joints), x[self.n_body :]

    def raw(self, x):
        """Raw energies and their gradients, keyed by term; disabled terms are skipped."""
        params, trans = self.split(x)
        out = {}
        cfg = self.config
        jac = None
        if cfg.use_joint or cfg.use_silhouette:
            jac = forward_jacobian(self.model, params, return_vertices=True)
        if cfg.use_joint:
            e, g, gt = joint_energy(self.regressor, self.model, params, trans, self.frame.gt_joints, jac)
            out["joint"] = (e, np.concatenate([g, gt]))
        if cfg.use_silhouette:
            j, verts = jac
            e, g_v, _ = silhouette_loss_and_grad(
                self.frame.mask, self.frame.camera, self.model.faces, verts + trans, cfg.sigma
            )
            out["silhouette"] = (e, np.concatenate([np.einsum("nc,ncp->p", g_v, j), g_v.sum(axis=0)]))
        if cfg.use_adv:
            e, g = adv_energy(self.disc, params)
            out["adv"] = (e, np.concatenate([g, np.zeros(3)]))
        return out

    @staticmethod
    def combine(raw, weights: EnergyWeights):
        total = 0.0
        grad = None
        for k, (e, g) in raw.items():
            w = getattr(weights, k)
            total += w * e
            grad = w * g if grad is None else grad + w * g
        return total, grad


@dataclass
class RefineResult:
    id: str
    params: BodyParams
    translation: np.ndarray
    trace: list
    initial_energy: float
    final_energy: float
    weights: EnergyWeights
    initial_raw: dict
    final_raw: dict
    best_iteration: int
    status: str = "ok"
    warnings: list = field(default_factory=list)

    def summary(self) -> dict:
        return {
            "id": self.id,
            "status": self.status,
            "initial_energy": self.initial_energy,
            "final_energy": self.final_energy,
            "best_iteration": self.best_iteration,
            "weights": self.weights.as_dict(),
            "initial_raw": self.initial_raw,
            "final_raw": self.final_raw,
            "trace": self.trace,
            "warnings": self.warnings,
        }


def refine_frame(frame: FrameRecord, model: BodyModel, regressor: JointRegressor,
                 discriminator: Discriminator | None, config: RefineConfig) -> RefineResult:
    """Minimize the weighted energy for one frame.

    ``trace[i]`` is the total weighted energy after step i + 1. The returned parameters
    are the lowest-energy iterate, including the start.
    """
    obj = _FrameObjective(frame, model, regressor, discriminator, config)
    x0 = np.concatenate([frame.params.to_vector(), frame.translation])

    def failed(reason, weights=EnergyWeights(0.0, 0.0, 0.0), raw=None, trace=()):
        logger.warning("frame %s: %s; keeping the initial parameters", frame.id, reason)
        return RefineResult(frame.id, frame.params, frame.translation, list(trace), math.nan, math.nan,
                            weights, raw or {}, {}, 0, status="failed", warnings=[reason])

    raw0 = obj.raw(x0)
    raw_values = {k: v[0] for k, v in raw0.items()}
    if not all(math.isfinite(v) and np.all(np.isfinite(raw0[k][1])) for k, v in raw_values.items()):
        return failed("non-finite energy at the initial parameters", raw=raw_values)
    weights = auto_weights(raw_values, config.enabled)
    energy, grad = obj.combine(raw0, weights)
    if grad is None:
        grad = np.zeros_like(x0)
    best = (energy, x0, 0, raw_values)
    initial = energy
    state = AdamState.zeros(x0.size)
    x = x0
    trace = []
    adam = config.adam
    for it in range(config.iterations):
        state, x = adam_step(state, x, grad, adam)
        raw = obj.raw(x)
        energy, grad = obj.combine(raw, weights)
        if grad is None:
            grad = np.zeros_like(x)
        if not (math.isfinite(energy) and np.all(np.isfinite(grad))):
            return failed(f"non-finite energy at iteration {it + 1}", weights, raw_values, trace)
        trace.append(energy)
        if energy < best[0]:
            best = (energy, x, it + 1, {k: v[0] for k, v in raw.items()})
    notes = []
    if not trace[-1] < initial:
        notes.append("final energy did not improve on the initial energy; returning the best iterate")
        logger.warning("frame %s: %s", frame.id, notes[-1])
    params, trans = obj.split(best[1])
    return RefineResult(frame.id, params, trans.copy(), trace, initial, best[0], weights, raw_values,
                        best[3], best[2], warnings=notes)


@dataclass
class DatasetResult:
    poses: dict  # id -> (BodyParams, translation)
    results: list
    discriminator: Discriminator | None
    disc_state: AdamState | None
    report: dict


def refine_dataset(frames, model: BodyModel, regressor: JointRegressor, config: RefineConfig,
                   discriminator: Discriminator | None = None, disc_state: AdamState | None = None) -> DatasetResult:
    """Refine frames in order, updating the discriminator once after each frame.

    Real samples are the initial parameters seen so far, fake samples the optimized
    ones, both drawn from replay buffers. In ``batched`` mode every frame is refined
    against the starting discriminator and the updates are applied afterwards.
    """
    frames = list(frames)
    rng = np.random.default_rng(config.seed)
    if discriminator is None and config.use_adv:
        discriminator = Discriminator.create(
            model.n_joints, model.n_shape, config.disc_hidden, config.disc_include_shape, seed=config.seed
        )
    include_shape = discriminator.include_shape if discriminator is not None else True
    real_buf = ReplayBuffer(config.replay_size)
    fake_buf = ReplayBuffer(config.replay_size)
    disc_cfg = AdamConfig(config.disc_lr, config.beta1, config.beta2, config.eps)
    disc_losses = []

    def update(frame, result):
        nonlocal discriminator, disc_state
        if discriminator is None or result.status != "ok":
            return
        real_buf.add(featurize(frame.params, include_shape))
        fake_buf.add(featurize(result.params, include_shape))
        real = real_buf.sample(rng, config.disc_batch)
        fake = fake_buf.sample(rng, config.disc_batch)
        discriminator, disc_state, loss = disc_update(discriminator, real, fake, disc_state, disc_cfg)
        disc_losses.append(loss)

    def run(frame, disc):
        try:
            return refine_frame(frame, model, regressor, disc, config)
        except (ValueError, FloatingPointError) as exc:
            logger.warning("frame %s failed: %s", frame.id, exc)
            return RefineResult(frame.id, frame.params, frame.translation, [], math.nan, math.nan,
                                EnergyWeights(0.0, 0.0, 0.0), {}, {}, 0, status="failed", warnings=[str(exc)])

    results = []
    if config.mode == "sequential":
        for frame in frames:
            result = run(frame, discriminator)
            results.append(result)
            update(frame, result)
    else:
        snapshot = discriminator
        if config.n_jobs > 1:
            with ThreadPoolExecutor(max_workers=config.n_jobs) as pool:
                results = list(pool.map(lambda f: run(f, snapshot), frames))
        else:
            results = [run(f, snapshot) for f in frames]
        for frame, result in zip(frames, results):
            update(frame, result)

    failures = [r.id for r in results if r.status != "ok"]
    if frames and len(failures) > config.max_failure_fraction * len(frames):
        raise RefineError(f"{len(failures)} of {len(frames)} frames failed: {failures}")
    ok = [r for r in results if r.status == "ok"]
    report = {
        "config": asdict(config),
        "seed": config.seed,
        "mode": config.mode,
        "deviation": "batched mode freezes the discriminator for the whole pass" if config.mode == "batched" else None,
        "frames": len(frames),
        "failures": failures,
        "mean_initial_energy": float(np.mean([r.initial_energy for r in ok])) if ok else None,
        "mean_final_energy": float(np.mean([r.final_energy for r in ok])) if ok else None,
        "mean_initial_joint_energy": _mean_raw(ok, "initial_raw", "joint"),
        "mean_final_joint_energy": _mean_raw(ok, "final_raw", "joint"),
        "discriminator_losses": disc_losses,
        "per_frame": [r.summary() for r in results],
    }
    poses = {r.id: (r.params, r.translation) for r in results}
    return DatasetResult(poses, results, discriminator, disc_state, report)


def _mean_raw(results, attr, key):
    vals = [getattr(r, attr)[key] for r in results if key in getattr(r, attr)]
    return float(np.mean(vals)) if vals else None


def frames_from_manifest(manifest, split: str = "all", poses: dict | None = None) -> list:
    """FrameRecords for a manifest split; ``poses`` overrides the manifest's pose set."""
    poses = manifest.load_poses() if poses is None else poses
    joints = manifest.load_joints()
    records = []
    for entry in manifest.frames_in(split):
        params, trans = poses[entry.pose_key]
        records.append(FrameRecord(entry.id, params, trans, joints[entry.joints_key],
                                   manifest.load_mask(entry), entry.crop_camera))
    return records
