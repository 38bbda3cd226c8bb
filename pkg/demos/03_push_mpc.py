"""Closed-loop planar pushing with gradient-shooting MPC.

A kinematic pusher (impedance-coupled point) shoves the resting block 10 cm
across the plane.  Every control step the planner unrolls a 10-step horizon
through the differentiable simulator and optimizes the pusher velocities by
backpropagation, warm-starting from the previous plan.
"""

import jax.numpy as jnp

from diffcontact.control import MpcConfig, run_mpc
from diffcontact.dynamics import (ActionInput, PhysParams, SceneModel,
                                  SceneState, free_state, rollout)
from diffcontact.geometry import PlaneGeom, SoftSdfParams, SphereCloud
from diffcontact.spatial import Pose

cloud = SphereCloud(
    jnp.array([[0.0, 0.0, 0.0], [0.05, 0.0, 0.0], [-0.05, 0.0, 0.0],
               [0.0, 0.05, 0.0], [0.0, -0.05, 0.0]]),
    jnp.full(5, 0.04))
model = SceneModel(clouds=(cloud,), plane=PlaneGeom(),
                   sdf=SoftSdfParams(beta=2000.0, gamma=2000.0,
                                     delta=0.05, margin=0.01))
phys = PhysParams.from_values(0.5, [1e-3] * 3, 0.4, 2000.0, 20.0)
h = 0.005

# Settle the block so the push starts from true rest.
settled = rollout(free_state([0.0, 0.0, 0.082]), [ActionInput()] * 400,
                  phys, model, h).states[-1]
rest = settled.positions[0]
print("settled at z = %.4f m" % float(rest[2]))

# Pusher 1 mm behind the block's -x face (half-extent 0.05 + radius 0.08).
x0 = SceneState(settled.positions, settled.orientations,
                jnp.zeros((1, 3)), jnp.zeros((1, 3)),
                actuator_points=(rest + jnp.array([-0.131, 0.0, 0.0]))[None],
                actuator_vels=jnp.zeros((1, 3)))
goal = Pose(rest + jnp.array([0.1, 0.0, 0.0]), settled.orientations[0])

cfg = MpcConfig(horizon=10, inner_iters=15, learning_rate=0.5,
                w_act=1e-5, action_bound=0.4)
result = run_mpc(x0, goal, phys, model, cfg, h, total_steps=100)

print("block x over time (goal %.3f):" % float(goal.position[0]))
for t in range(0, 101, 20):
    print("  step %3d  x = %.4f m" % (t, float(result.states[t].positions[0, 0])))
err = float(jnp.linalg.norm(result.states[-1].positions[0] - goal.position))
print("final position error: %.4f m" % err)
print("median replanning time: %.1f ms" % (1e3 * result.median_plan_time))
