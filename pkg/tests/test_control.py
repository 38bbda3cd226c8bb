import jax.numpy as jnp
import numpy as np
import pytest

from diffcontact.control import MpcConfig, MpcResult, Planner, plan, run_mpc
from diffcontact.dynamics import free_state
from diffcontact.spatial import Pose

from conftest import H


def pusher_state(rest_z):
    # Body at rest with the pusher 1 mm behind its -x face.
    x = free_state([0.0, 0.0, rest_z])
    return x.__class__(x.positions, x.orientations, x.lin_vels, x.ang_vels,
                       actuator_points=jnp.array([[-0.131, 0.0, rest_z]]),
                       actuator_vels=jnp.zeros((1, 3)))


def test_config_validation():
    with pytest.raises(ValueError):
        MpcConfig(horizon=0)
    with pytest.raises(ValueError):
        MpcConfig(action_bound=float("inf"))


def test_plan_respects_action_bound(cloud, soft_phys, model):
    state = pusher_state(0.0825)
    goal = Pose(jnp.array([0.1, 0.0, 0.0825]), jnp.array([1.0, 0, 0, 0]))
    cfg = MpcConfig(horizon=6, inner_iters=8, action_bound=0.3)
    result = plan(state, goal, soft_phys, model, cfg, H)
    acts = np.asarray(result.actions)
    assert acts.shape == (6, 3)
    assert np.all(np.abs(acts) <= 0.3 + 1e-12)
    np.testing.assert_allclose(acts[:, 2], 0.0)    # planar
    assert np.isfinite(result.cost) and not result.warning


def test_plan_pushes_toward_goal(cloud, soft_phys, model):
    # Goal in +x with the pusher behind the body: the optimized first command
    # must move the pusher toward the body, i.e. have positive x velocity.
    state = pusher_state(0.0825)
    goal = Pose(jnp.array([0.1, 0.0, 0.0825]), jnp.array([1.0, 0, 0, 0]))
    cfg = MpcConfig(horizon=8, inner_iters=12, learning_rate=0.5,
                    action_bound=0.4)
    result = plan(state, goal, soft_phys, model, cfg, H)
    assert float(result.actions[0, 0]) > 0.05


def test_warm_start_shift(cloud, soft_phys, model):
    state = pusher_state(0.0825)
    goal = Pose(jnp.array([0.1, 0.0, 0.0825]), jnp.array([1.0, 0, 0, 0]))
    planner = Planner(goal, soft_phys, model, 1, MpcConfig(horizon=4,
                                                           inner_iters=3), H)
    raw = jnp.arange(8.0).reshape(4, 2)
    shifted = planner.shift(raw)
    np.testing.assert_array_equal(np.asarray(shifted),
                                  [[2, 3], [4, 5], [6, 7], [6, 7]])
    # A warm-started plan from the same state must not be worse than the
    # plan it came from (Adam restarts, but the seed point is the optimum).
    first = planner.plan(state)
    again = planner.plan(state, warm_raw=first.raw)
    assert again.cost <= first.cost + 1e-9


def test_short_closed_loop_reduces_distance(cloud, phys, model):
    # 100 closed-loop steps of pushing toward a +10 cm goal must cut the
    # body-to-goal distance well below its starting value.  Start from a
    # fully settled rest state so no drop transient pollutes the push.
    from diffcontact.dynamics import ActionInput, SceneState, rollout

    settle = rollout(free_state([0.0, 0.0, 0.082]), [ActionInput()] * 400,
                     phys, model, H).states[-1]
    rest = settle.positions[0]
    state = SceneState(settle.positions, settle.orientations,
                       jnp.zeros((1, 3)), jnp.zeros((1, 3)),
                       actuator_points=(rest + jnp.array([-0.131, 0, 0]))[None],
                       actuator_vels=jnp.zeros((1, 3)))
    goal_pos = rest + jnp.array([0.1, 0.0, 0.0])
    goal = Pose(goal_pos, settle.orientations[0])
    cfg = MpcConfig(horizon=10, inner_iters=15, learning_rate=0.5,
                    w_act=1e-5, action_bound=0.4)
    result = run_mpc(state, goal, phys, model, cfg, H, total_steps=100)
    assert len(result.states) == 101 and len(result.actions) == 100
    start = float(jnp.linalg.norm(state.positions[0][:2] - goal_pos[:2]))
    end = float(jnp.linalg.norm(result.states[-1].positions[0][:2]
                                - goal_pos[:2]))
    assert end < 0.5 * start
    assert result.median_plan_time > 0.0
    assert all(np.isfinite(c) for c in result.costs)


def test_mpc_result_median_time():
    r = MpcResult(states=(), actions=(), costs=[], plan_times=[0.1, 0.3, 0.2])
    assert r.median_plan_time == pytest.approx(0.2)
    assert MpcResult((), (), [], []).median_plan_time == 0.0
