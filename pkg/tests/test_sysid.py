import jax.numpy as jnp
import numpy as np
import pytest

from diffcontact.dynamics import ActionInput, free_state, rollout
from diffcontact.render import Camera, PSNR_CAP_DB, render_state
from diffcontact.spatial import Pose, quat_exp
from diffcontact.sysid import (Dataset, IdentifyConfig, ObservedSequence,
                               cem_minimize, estimate_initial_state, identify,
                               metrics, quat_alignment_sq, trajectory_loss)

from conftest import H


def observe(traj, actions):
    return ObservedSequence(x0=traj.states[0], actions=jnp.asarray(actions),
                            positions=jnp.asarray(traj.positions(0)),
                            orientations=jnp.asarray(traj.orientations(0)))


def test_identify_config_validation():
    with pytest.raises(ValueError):
        IdentifyConfig(mode="video")
    with pytest.raises(ValueError):
        IdentifyConfig(free=())


def test_quat_alignment_handles_double_cover():
    q = quat_exp(jnp.array([0.2, -0.1, 0.4]))
    assert float(quat_alignment_sq(q, q)) == pytest.approx(0.0, abs=1e-15)
    assert float(quat_alignment_sq(q, -q)) == pytest.approx(0.0, abs=1e-15)


def test_trajectory_loss_zero_on_identical(cloud, phys, model):
    x0 = free_state([0, 0, 0.2], velocity=[0.1, 0, 0])
    traj = rollout(x0, [ActionInput()] * 10, phys, model, H)
    obs = observe(traj, np.zeros((10, 3)))
    assert float(trajectory_loss(traj, obs)) == 0.0


def test_trajectory_loss_constant_offset(cloud, phys, model):
    # A rigid 0.1 m translation offset on every one of the 11 frames gives a
    # summed squared error of 11 * 0.01 with no rotation term.
    x0 = free_state([0, 0, 0.2])
    traj = rollout(x0, [ActionInput()] * 10, phys, model, H)
    obs = observe(traj, np.zeros((10, 3)))
    shifted = ObservedSequence(
        x0=obs.x0, actions=obs.actions,
        positions=obs.positions + jnp.array([0.1, 0.0, 0.0]),
        orientations=obs.orientations)
    assert float(trajectory_loss(traj, shifted)) == pytest.approx(0.11,
                                                                  rel=1e-12)


def test_trajectory_loss_validation(cloud, phys, model):
    x0 = free_state([0, 0, 0.2])
    traj = rollout(x0, [ActionInput()] * 5, phys, model, H)
    obs = observe(traj, np.zeros((5, 3)))
    short = ObservedSequence(x0=obs.x0, actions=obs.actions[:3],
                             positions=obs.positions[:4],
                             orientations=obs.orientations[:4])
    with pytest.raises(ValueError):
        trajectory_loss(traj, short)
    with pytest.raises(ValueError):
        trajectory_loss(traj, obs, mode="silhouette")   # no images attached
    with pytest.raises(ValueError):
        trajectory_loss(traj, obs, mode="nope")


def test_metrics_hand_values():
    pos = np.zeros((4, 3))
    quat = np.tile([1.0, 0, 0, 0], (4, 1))
    e_t, e_r, e_p = metrics(pos, quat, pos, quat)
    assert e_t == 0.0 and e_r == 0.0 and e_p is None

    off = pos + [0.1, 0.0, 0.0]
    rot = np.tile(np.asarray(quat_exp(jnp.array([0.0, 0.0, 0.2]))), (4, 1))
    e_t, e_r, _ = metrics(off, rot, pos, quat)
    assert e_t == pytest.approx(0.1, rel=1e-12)
    assert e_r == pytest.approx(0.2, rel=1e-9)

    imgs = np.zeros((4, 8, 8))
    _, _, e_p = metrics(pos, quat, pos, quat, imgs + 0.1, imgs)
    assert e_p == pytest.approx(20.0, abs=1e-9)
    _, _, e_p = metrics(pos, quat, pos, quat, imgs, imgs)
    assert e_p == PSNR_CAP_DB

    with pytest.raises(ValueError):
        metrics(pos[:3], quat[:3], pos, quat)


def test_cem_minimize_quadratic():
    target = np.array([0.3, -1.2, 2.0])
    obj = lambda x: float(np.sum((x - target) ** 2))
    best, val = cem_minimize(obj, [-5, -5, -5], [5, 5, 5], population=64,
                             elites=8, iterations=40, seed=0)
    np.testing.assert_allclose(best, target, atol=0.05)
    assert val < 1e-2


def test_cem_minimize_deterministic():
    obj = lambda x: float(np.sum(x ** 2))
    a = cem_minimize(obj, [-1, -1], [1, 1], seed=3)
    b = cem_minimize(obj, [-1, -1], [1, 1], seed=3)
    np.testing.assert_array_equal(a[0], b[0])
    assert a[1] == b[1]


def test_cem_minimize_validation():
    obj = lambda x: 0.0
    with pytest.raises(ValueError):
        cem_minimize(obj, [0.0], [0.0])
    with pytest.raises(ValueError):
        cem_minimize(obj, [0.0], [1.0], population=8, elites=8)


def test_identify_reduces_loss(cloud, soft_phys, model):
    # Short sliding clip generated at mu = 0.4; starting the refinement at
    # mu = 0.8 must strictly reduce the pose loss.
    from diffcontact.dynamics import PhysParams

    x0 = free_state([0.0, 0.0, 0.0825], velocity=[0.5, 0.0, 0.0])
    traj = rollout(x0, [ActionInput()] * 12, soft_phys, model, H)
    data = Dataset(train=(observe(traj, np.zeros((12, 3))),), test=(), h=H)
    init = PhysParams.from_values(0.5, [1e-3] * 3, 0.8, 1000.0, 2.0)
    res = identify(data, init, cloud, model,
                   IdentifyConfig(free=("mu",), iterations=40,
                                  learning_rate=0.05))
    assert res.loss_history[0] > 0.0
    assert min(res.loss_history) < 0.2 * res.loss_history[0]
    assert abs(float(res.phys.mu) - 0.4) < abs(0.8 - 0.4)


def test_estimate_initial_state_static_guess(cloud, phys, model):
    # Frames of a free-falling body with zero initial velocity, with the exact
    # pose as the guess: the estimator must keep the pose and report a twist
    # near zero (gravity is explained by the simulator, not the velocity).
    cam = Camera.looking_down(1.0, width=48, height=48)
    x0 = free_state([0.0, 0.0, 0.3])
    traj = rollout(x0, [ActionInput()] * 2, phys, model, H)
    frames = jnp.stack([render_state(cloud, Pose(s.positions[0],
                                                 s.orientations[0]), cam)
                        for s in traj.states])
    est = estimate_initial_state(frames, cam, cloud, phys, model, x0, H,
                                 pose_iters=40, vel_iters=40)
    np.testing.assert_allclose(np.asarray(est.pose.position), [0, 0, 0.3],
                               atol=2e-3)
    assert float(jnp.linalg.norm(est.velocity[:3])) < 0.05
    assert est.converged
    with pytest.raises(ValueError):
        estimate_initial_state(frames[:2], cam, cloud, phys, model, x0, H)
