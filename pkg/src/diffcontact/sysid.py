"""System identification: losses, the refinement loop, CEM baseline, metrics.

Identification is self-consistent at desk scale: observations are produced by
the simulator itself (poses and/or rendered silhouettes), and the free
physical / geometric parameters are recovered by first-order updates with
gradient-moment averaging driven by reverse-mode rollout gradients.  A
cross-entropy-method search over the same raw-parameter space serves as the
gradient-free baseline.

Geometry slices, when free, receive gradients only through the physics path:
the renderer always sees its sphere parameters through a stop-gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import jax
import jax.numpy as jnp
import numpy as np

from .diff import ParamVector, make_rollout_loss
from .dynamics import NumericalError, PhysParams, SceneModel, SceneState, Trajectory
from .geometry import SphereCloud
from .render import Camera, psnr, splat_silhouette
from .spatial import Pose

DEFAULT_ROT_WEIGHT = 0.1   # m^2 per unit of squared quaternion misalignment


@dataclass(frozen=True)
class ObservedSequence:
    """One observed interaction: known start state, actions, and observations."""

    x0: SceneState
    actions: jnp.ndarray                 # (T, 3) commanded actuator velocity
    positions: jnp.ndarray               # (T+1, 3)
    orientations: jnp.ndarray            # (T+1, 4)
    silhouettes: jnp.ndarray | None = None   # (T+1, H, W)
    camera: Camera | None = None

    @property
    def horizon(self) -> int:
        return int(self.actions.shape[0])


@dataclass(frozen=True)
class Dataset:
    """Train/test split of observed sequences sharing one timestep and scene."""

    train: tuple
    test: tuple
    h: float


@dataclass
class IdentifyConfig:
    mode: str = "pose"                   # "pose" | "silhouette"
    learning_rate: float = 0.05
    iterations: int = 300
    free: tuple = ("mu", "K", "D")
    seed: int = 0
    rot_weight: float = DEFAULT_ROT_WEIGHT

    def __post_init__(self):
        if self.mode not in ("pose", "silhouette"):
            raise ValueError("mode must be 'pose' or 'silhouette'")
        if not self.free:
            raise ValueError("at least one free parameter slice is required")


def quat_alignment_sq(qa, qb):
    """(1 - |qa . qb|)^2 rows for stacked quaternion arrays."""
    return (1.0 - jnp.abs(jnp.sum(qa * qb, axis=-1))) ** 2


def pose_loss_arrays(pos, quat, obs_pos, obs_quat, rot_weight=DEFAULT_ROT_WEIGHT):
    return (jnp.sum((pos - obs_pos) ** 2)
            + rot_weight * jnp.sum(quat_alignment_sq(quat, obs_quat)))


def silhouette_loss_arrays(pos, quat, obs_images, camera, centers, scales):
    """Mean-pixel L1 between rendered and observed silhouettes, summed over t.

    Geometry enters through a stop-gradient: sphere parameters are fine-tuned
    exclusively through the physical collision path, never the renderer.
    """
    centers = jax.lax.stop_gradient(centers)
    scales = jax.lax.stop_gradient(scales)

    def frame_loss(t):
        cloud = SphereCloud(centers, scales)
        img = splat_silhouette(
            SphereCloud(Pose(pos[t], quat[t]).apply_many(cloud.centers), scales),
            camera)
        return jnp.mean(jnp.abs(img - obs_images[t]))

    return sum(frame_loss(t) for t in range(pos.shape[0]))


def trajectory_loss(predicted: Trajectory, observed: ObservedSequence,
                    mode: str = "pose", rot_weight=DEFAULT_ROT_WEIGHT,
                    cloud: SphereCloud | None = None):
    """Loss between a simulated trajectory and an observed sequence."""
    if len(predicted) != observed.positions.shape[0]:
        raise ValueError("trajectory lengths differ")
    pos = predicted.positions(0)
    quat = predicted.orientations(0)
    if mode == "pose":
        return pose_loss_arrays(pos, quat, observed.positions,
                                observed.orientations, rot_weight)
    if mode == "silhouette":
        if observed.silhouettes is None or observed.camera is None:
            raise ValueError("silhouette mode needs images and a camera")
        if cloud is None:
            raise ValueError("silhouette mode needs the sphere cloud")
        return silhouette_loss_arrays(pos, quat, observed.silhouettes,
                                      observed.camera, cloud.centers,
                                      cloud.scales)
    raise ValueError("unknown mode %r" % mode)


def sequence_loss_fn(seq: ObservedSequence, config: IdentifyConfig):
    """Build the fast-path loss closure for one observed sequence."""
    if config.mode == "pose":
        def fn(pos, quat, lin, ang, pts, centers, scales):
            return pose_loss_arrays(pos, quat, seq.positions,
                                    seq.orientations, config.rot_weight)
        return fn
    if seq.silhouettes is None or seq.camera is None:
        raise ValueError("silhouette mode needs images and a camera")

    def fn(pos, quat, lin, ang, pts, centers, scales):
        return silhouette_loss_arrays(pos, quat, seq.silhouettes,
                                      seq.camera, centers, scales)
    return fn


@dataclass
class IdentifyResult:
    pv: ParamVector
    theta: jnp.ndarray
    loss_history: np.ndarray

    @property
    def phys(self) -> PhysParams:
        return self.pv.to_phys(self.theta)

    @property
    def cloud(self) -> SphereCloud:
        return self.pv.to_cloud(self.theta)


class AdamState:
    """Plain Adam with bias correction (decay 0.9 / 0.999, epsilon 1e-8)."""

    def __init__(self, size, lr):
        self.m = jnp.zeros(size)
        self.v = jnp.zeros(size)
        self.t = 0
        self.lr = lr

    def update(self, theta, grad):
        self.t += 1
        self.m = 0.9 * self.m + 0.1 * grad
        self.v = 0.999 * self.v + 0.001 * grad * grad
        mh = self.m / (1.0 - 0.9 ** self.t)
        vh = self.v / (1.0 - 0.999 ** self.t)
        return theta - self.lr * mh / (jnp.sqrt(vh) + 1e-8)


def identify(dataset: Dataset, phys_init: PhysParams, cloud: SphereCloud,
             model: SceneModel, config: IdentifyConfig) -> IdentifyResult:
    """First-order identification of the free slices on the training split.

    Returns the best-loss parameters seen and the full per-iteration loss
    curve (best-so-far never increases by construction).
    """
    pvs = [ParamVector(phys_init, cloud, seq.x0, free=config.free)
           for seq in dataset.train]
    losses = [make_rollout_loss(pv, seq.actions, model, dataset.h,
                                sequence_loss_fn(seq, config))
              for pv, seq in zip(pvs, dataset.train)]

    def total(theta):
        return sum(f(theta) for f in losses)

    grad_fn = jax.value_and_grad(total)
    theta = pvs[0].theta()
    adam = AdamState(theta.size, config.learning_rate)
    best_theta, best_loss = theta, float("inf")
    history = []
    for it in range(config.iterations):
        loss, grad = grad_fn(theta)
        loss = float(loss)
        if not np.isfinite(loss):
            raise NumericalError("non-finite loss at iteration %d" % it)
        history.append(loss)
        if loss < best_loss:
            best_loss, best_theta = loss, theta
        theta = adam.update(theta, grad)
    return IdentifyResult(pv=pvs[0], theta=best_theta,
                          loss_history=np.asarray(history))


# ---------------------------------------------------------------------------
# Cross-entropy method baseline
# ---------------------------------------------------------------------------

def cem_minimize(objective, bounds_lo, bounds_hi, population=32, elites=8,
                 iterations=30, seed=0, init_mean=None, init_std=None,
                 smoothing=0.5):
    """Generic CEM over a box: iterated Gaussian resampling + elite refit.

    The sampling std is a smoothed blend of the previous std and the elite
    std, plus an exploration floor that decays linearly to zero over the run;
    a plain elite refit collapses too fast on narrow curved valleys.
    Returns ``(best_x, best_value)``; deterministic given the seed.
    """
    lo = np.asarray(bounds_lo, dtype=np.float64)
    hi = np.asarray(bounds_hi, dtype=np.float64)
    if lo.shape != hi.shape or np.any(hi <= lo):
        raise ValueError("invalid bounds")
    if population < 2 * elites:
        raise ValueError("population must be at least twice the elite count")
    rng = np.random.RandomState(seed)
    mean = 0.5 * (lo + hi) if init_mean is None else np.asarray(init_mean, float)
    std0 = (hi - lo) / 4.0 if init_std is None else np.asarray(init_std, float)
    std = std0.copy()
    best_x, best_val = None, float("inf")
    for it in range(iterations + 1):      # final iteration only evaluates
        floor = std0 * 0.1 * max(0.0, 1.0 - it / max(iterations, 1))
        samples = rng.normal(mean, np.maximum(std, floor),
                             size=(population, lo.size))
        samples = np.clip(samples, lo, hi)
        values = np.asarray([float(objective(s)) for s in samples])
        order = np.argsort(values, kind="stable")
        if values[order[0]] < best_val:
            best_val = float(values[order[0]])
            best_x = samples[order[0]].copy()
        elite = samples[order[:elites]]
        mean = (1.0 - smoothing) * mean + smoothing * elite.mean(axis=0)
        std = ((1.0 - smoothing) * std + smoothing * elite.std(axis=0)) + 1e-12
    return best_x, best_val


def cem_identify(dataset: Dataset, phys_init: PhysParams, cloud: SphereCloud,
                 model: SceneModel, config: IdentifyConfig,
                 bounds_lo, bounds_hi, population=32, elites=8,
                 iterations=30) -> IdentifyResult:
    """Gradient-free counterpart of :func:`identify` over the same raw space."""
    pvs = [ParamVector(phys_init, cloud, seq.x0, free=config.free)
           for seq in dataset.train]
    losses = [make_rollout_loss(pv, seq.actions, model, dataset.h,
                                sequence_loss_fn(seq, config))
              for pv, seq in zip(pvs, dataset.train)]

    def objective(theta):
        try:
            return sum(float(f(jnp.asarray(theta))) for f in losses)
        except (NumericalError, FloatingPointError):
            return float("inf")

    best, best_val = cem_minimize(objective, bounds_lo, bounds_hi,
                                  population=population, elites=elites,
                                  iterations=iterations, seed=config.seed,
                                  init_mean=np.asarray(pvs[0].theta()))
    return IdentifyResult(pv=pvs[0], theta=jnp.asarray(best),
                          loss_history=np.asarray([best_val]))


# ---------------------------------------------------------------------------
# Initial-state estimation from silhouettes
# ---------------------------------------------------------------------------

@dataclass
class InitialStateEstimate:
    pose: Pose
    velocity: jnp.ndarray
    final_image_l1: float
    converged: bool


def estimate_initial_state(frames, camera: Camera, cloud: SphereCloud,
                           phys: PhysParams, model: SceneModel,
                           x0_guess: SceneState, h: float,
                           pose_iters=300, vel_iters=200,
                           pose_lr=2e-3, vel_lr=2e-2,
                           l1_threshold=0.05) -> InitialStateEstimate:
    """Recover the initial pose and velocity from the first three silhouettes.

    Phase 1 optimizes the frame-0 pose against its silhouette with everything
    else frozen; phase 2 freezes that pose and recovers the initial twist by
    aligning all three frames through the simulator.  Assumes no contact in
    these frames (the caller's responsibility).
    """
    frames = jnp.asarray(frames)
    if frames.shape[0] < 3:
        raise ValueError("need silhouettes for frames 0..2")

    # Phase 1: frame-0 pose only, no dynamics involved.
    base_pos = x0_guess.positions[0]
    base_quat = x0_guess.orientations[0]

    def pose_objective(tangent):
        from .spatial import quat_exp, quat_multiply, quat_normalize

        pos = base_pos + tangent[:3]
        quat = quat_normalize(quat_multiply(base_quat, quat_exp(tangent[3:])))
        img = splat_silhouette(
            SphereCloud(Pose(pos, quat).apply_many(cloud.centers), cloud.scales),
            camera)
        return jnp.mean(jnp.abs(img - frames[0]))

    tangent = jnp.zeros(6)
    grad_fn = jax.jit(jax.value_and_grad(pose_objective))
    adam = AdamState(6, pose_lr)
    best_t, best_l = tangent, float("inf")
    for _ in range(pose_iters):
        l, g = grad_fn(tangent)
        if float(l) < best_l:
            best_l, best_t = float(l), tangent
        tangent = adam.update(tangent, g)

    from .spatial import quat_exp, quat_multiply, quat_normalize

    pose0 = Pose(base_pos + best_t[:3],
                 quat_normalize(quat_multiply(base_quat, quat_exp(best_t[3:]))))

    # Phase 2: twist from frames 0..2 through the simulator.
    x0 = replace(x0_guess,
                 positions=pose0.position[None],
                 orientations=pose0.orientation[None])
    pv = ParamVector(phys, cloud, x0, free=("x0_vel",))
    actions = jnp.zeros((2, 3))

    def frames_loss(pos, quat, lin, ang, pts, centers, scales):
        return silhouette_loss_arrays(pos, quat, frames[:3], camera,
                                      centers, scales)

    total = make_rollout_loss(pv, actions, model, h, frames_loss)
    vgrad = jax.value_and_grad(total)
    theta = pv.theta()
    adam = AdamState(theta.size, vel_lr)
    best_theta, best_loss = theta, float("inf")
    for _ in range(vel_iters):
        l, g = vgrad(theta)
        if float(l) < best_loss:
            best_loss, best_theta = float(l), theta
        theta = adam.update(theta, g)

    final_l1 = best_loss / 3.0
    return InitialStateEstimate(pose=pose0, velocity=best_theta,
                                final_image_l1=final_l1,
                                converged=final_l1 <= l1_threshold)


# ---------------------------------------------------------------------------
# Evaluation metrics
# ---------------------------------------------------------------------------

def metrics(pred_positions, pred_orientations, gt_positions, gt_orientations,
            pred_images=None, gt_images=None):
    """Average translation error (m), rotation error (rad), and PSNR (dB).

    Inputs stack N sequences x T frames (or any matching leading shape).
    """
    pp = jnp.asarray(pred_positions).reshape(-1, 3)
    gp = jnp.asarray(gt_positions).reshape(-1, 3)
    pq = jnp.asarray(pred_orientations).reshape(-1, 4)
    gq = jnp.asarray(gt_orientations).reshape(-1, 4)
    if pp.shape != gp.shape or pq.shape != gq.shape:
        raise ValueError("prediction/ground-truth shapes differ")
    e_trans = float(jnp.mean(jnp.linalg.norm(pp - gp, axis=1)))
    dots = jnp.clip(jnp.abs(jnp.sum(pq * gq, axis=1)), 0.0, 1.0)
    e_rot = float(jnp.mean(2.0 * jnp.arccos(dots)))
    e_psnr = None
    if pred_images is not None and gt_images is not None:
        pi = jnp.asarray(pred_images)
        gi = jnp.asarray(gt_images)
        flat_p = pi.reshape(-1, pi.shape[-2], pi.shape[-1])
        flat_g = gi.reshape(-1, gi.shape[-2], gi.shape[-1])
        e_psnr = float(jnp.mean(jnp.stack(
            [psnr(flat_p[i], flat_g[i]) for i in range(flat_p.shape[0])])))
    return e_trans, e_rot, e_psnr
