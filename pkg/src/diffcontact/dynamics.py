"""Closed-form complementarity-free contact dynamics.

One step of the simulator:

1. generate contacts at the incoming state,
2. accumulate non-contact wrenches (gravity, gyroscopic, impedance),
3. form the unconstrained velocity ``b = v + h M^-1 tau``,
4. stack the polyhedral dual-cone rows ``J^n - mu J^d_i`` with replicated
   distances, and evaluate the contact force in closed form
   ``lambda = softplus(-K (h Jt b + phit) - D Jt b)``,
5. update ``v' = b + h M^-1 Jt^T lambda`` and integrate the pose
   semi-implicitly (position with the new linear velocity, orientation with
   the exact quaternion exponential of the new body angular velocity).

No iterative complementarity solve anywhere; every quantity is an explicit
smooth function of state, action, physical parameters, and sphere geometry,
so reverse-mode differentiation through whole rollouts just works.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import jax
import jax.numpy as jnp
import numpy as np

from . import geometry
from .geometry import ContactSet, PlaneGeom, SoftSdfParams, SphereCloud
from .spatial import Pose, quat_exp_integrate, tangent_basis

GRAVITY = 9.81
MU_MAX = 5.0


class NumericalError(RuntimeError):
    """Raised when a state or adjoint stops being finite."""


@dataclass(frozen=True)
class PhysParams:
    """Learnable physical parameters, stored as unconstrained logs.

    ``mass_raw`` (B,) and ``inertia_raw`` (B, 3) are per body; ``mu_raw``,
    ``k_raw``, ``d_raw`` are scalars shared by all contact pairs.  Values are
    recovered with ``exp`` so gradient descent stays in the positive cone;
    the friction coefficient is additionally clamped smoothly below
    ``MU_MAX``.
    """

    mass_raw: jnp.ndarray
    inertia_raw: jnp.ndarray
    mu_raw: jnp.ndarray
    k_raw: jnp.ndarray
    d_raw: jnp.ndarray

    @staticmethod
    def from_values(mass, inertia_diag, mu, stiffness, damping) -> "PhysParams":
        mass = jnp.atleast_1d(jnp.asarray(mass, dtype=jnp.float64))
        inertia = jnp.atleast_2d(jnp.asarray(inertia_diag, dtype=jnp.float64))
        if jnp.any(mass <= 0) or jnp.any(inertia <= 0) or min(mu, stiffness, damping) <= 0:
            raise ValueError("physical parameters must be strictly positive")
        # Invert the smooth friction clamp so from_values round-trips.
        mu_pre = MU_MAX * math.atanh(min(mu, MU_MAX * 0.999999) / MU_MAX)
        return PhysParams(
            mass_raw=jnp.log(mass),
            inertia_raw=jnp.log(inertia),
            mu_raw=jnp.log(jnp.asarray(mu_pre, dtype=jnp.float64)),
            k_raw=jnp.log(jnp.asarray(stiffness, dtype=jnp.float64)),
            d_raw=jnp.log(jnp.asarray(damping, dtype=jnp.float64)),
        )

    @property
    def num_bodies(self) -> int:
        return int(self.mass_raw.shape[0])

    @property
    def masses(self):
        return jnp.exp(self.mass_raw)

    @property
    def inertias(self):
        return jnp.exp(self.inertia_raw)

    @property
    def mu(self):
        return MU_MAX * jnp.tanh(jnp.exp(self.mu_raw) / MU_MAX)

    @property
    def stiffness(self):
        return jnp.exp(self.k_raw)

    @property
    def damping(self):
        return jnp.exp(self.d_raw)

    def inv_mass_diag(self):
        """Diagonal of M^-1 over the stacked (6B,) generalized velocity."""
        blocks = []
        for b in range(self.num_bodies):
            blocks.append(jnp.repeat(1.0 / self.masses[b], 3))
            blocks.append(1.0 / self.inertias[b])
        return jnp.concatenate(blocks)


@dataclass(frozen=True)
class SceneState:
    """Stacked per-body poses and twists plus kinematic actuator state."""

    positions: jnp.ndarray        # (B, 3) world
    orientations: jnp.ndarray     # (B, 4) unit quaternions, body->world
    lin_vels: jnp.ndarray         # (B, 3) world
    ang_vels: jnp.ndarray         # (B, 3) body frame
    actuator_points: jnp.ndarray | None = None   # (P, 3) world
    actuator_vels: jnp.ndarray | None = None     # (P, 3) world

    @property
    def num_bodies(self) -> int:
        return int(self.positions.shape[0])

    def pose(self, b: int) -> Pose:
        return Pose(self.positions[b], self.orientations[b])

    def poses(self):
        return [self.pose(b) for b in range(self.num_bodies)]

    def stacked_velocity(self):
        return jnp.concatenate(
            [jnp.concatenate([self.lin_vels[b], self.ang_vels[b]])
             for b in range(self.num_bodies)])

    def is_finite(self) -> bool:
        arrays = [self.positions, self.orientations, self.lin_vels, self.ang_vels]
        if self.actuator_points is not None:
            arrays.append(self.actuator_points)
        return all(bool(jnp.all(jnp.isfinite(a))) for a in arrays)


@dataclass(frozen=True)
class ActionInput:
    """Per-step actuation.

    ``actuator_vel`` is the commanded world velocity of the kinematic query
    points.  ``impedance`` optionally couples dynamic bodies to targets
    through a spring-damper: tuples ``(body, target_pos, target_vel)`` with
    shared gains ``k_act`` (N/m) and ``d_act`` (N s/m).
    """

    actuator_vel: jnp.ndarray = field(default_factory=lambda: jnp.zeros(3))
    impedance: tuple = ()
    k_act: float = 0.0
    d_act: float = 0.0


@dataclass(frozen=True)
class SceneModel:
    """Static scene description: collision clouds, ground plane, SDF shaping."""

    clouds: tuple                      # one SphereCloud per body
    plane: PlaneGeom | None = None
    sdf: SoftSdfParams = field(default_factory=SoftSdfParams)
    n_d: int = 4
    gravity: float = GRAVITY

    @property
    def num_bodies(self) -> int:
        return len(self.clouds)

    def with_clouds(self, clouds) -> "SceneModel":
        return replace(self, clouds=tuple(clouds))


@dataclass(frozen=True)
class DualConeSystem:
    """Stacked dual-cone rows and replicated distances.

    ``jtilde`` is (n_c * n_d, 6B) with rows ``J^n - mu J^d_i``; ``phitilde``
    replicates each contact distance n_d times; ``bias`` carries prescribed
    witness velocities of kinematic participants projected on each row.
    """

    jtilde: jnp.ndarray
    phitilde: jnp.ndarray
    bias: jnp.ndarray
    n_contacts: int
    n_d: int
    tangents: tuple               # per contact: list of n_d world tangent dirs
    normal_rows: jnp.ndarray      # (n_c, 6B) plain normal rows, for diagnostics


def dual_cone_stack(contacts: ContactSet, mu, n_d: int = 4) -> DualConeSystem:
    """Project contact Jacobians onto dual-cone faces and stack them."""
    rows, phis, bias, tangents, normal_rows = [], [], [], [], []
    for c in contacts:
        jn = c.jac[0]
        dirs = tangent_basis(c.normal, n_d)
        t1, t2 = c.frame[1], c.frame[2]
        per_contact = []
        for d in dirs:
            # d lies in span(t1, t2); express J^d through the stored frame rows.
            jd = jnp.dot(d, t1) * c.jac[1] + jnp.dot(d, t2) * c.jac[2]
            rows.append(jn - mu * jd)
            phis.append(c.phi)
            bias.append(jnp.dot(c.normal - mu * d, c.rhs_vel))
            per_contact.append(d)
        tangents.append(per_contact)
        normal_rows.append(jn)
    n_c = len(contacts)
    dim = 6 * contacts.num_bodies
    if n_c == 0:
        return DualConeSystem(jnp.zeros((0, dim)), jnp.zeros(0), jnp.zeros(0),
                              0, n_d, (), jnp.zeros((0, dim)))
    return DualConeSystem(jnp.stack(rows), jnp.stack(phis), jnp.stack(bias),
                          n_c, n_d, tuple(tangents), jnp.stack(normal_rows))


def contact_impulse(b, dual: DualConeSystem, params: PhysParams, h):
    """Closed-form impedance contact force on the dual-cone faces."""
    if dual.n_contacts == 0:
        return jnp.zeros(0)
    vel = dual.jtilde @ b + dual.bias
    return jax.nn.softplus(-params.stiffness * (h * vel + dual.phitilde)
                           - params.damping * vel)


def contact_forces(dual: DualConeSystem, lam, mu):
    """Reconstruct per-contact normal/tangential force from the face forces.

    Face force ``lam_i`` acts along ``n - mu d_i``; summing over the fan gives
    normal magnitude ``f_n = sum_i lam_i`` and tangential vector
    ``f_t = -mu sum_i lam_i d_i`` per contact, so ``|f_t| <= mu f_n`` holds by
    construction.
    """
    out = []
    n_d = dual.n_d
    for c in range(dual.n_contacts):
        lam_c = lam[c * n_d:(c + 1) * n_d]
        f_n = jnp.sum(lam_c)
        f_t = -mu * sum(lam_c[i] * dual.tangents[c][i] for i in range(n_d))
        out.append((f_n, f_t))
    return out


def external_wrench(state: SceneState, action: ActionInput, params: PhysParams,
                    g: float = GRAVITY):
    """Sum of non-contact generalized forces: gravity, gyroscopic, impedance."""
    parts = []
    targets = {int(b): (jnp.asarray(tp), jnp.asarray(tv))
               for b, tp, tv in action.impedance}
    for b in range(state.num_bodies):
        force = jnp.array([0.0, 0.0, -params.masses[b] * g])
        if b in targets:
            tp, tv = targets[b]
            force = force + action.k_act * (tp - state.positions[b]) \
                + action.d_act * (tv - state.lin_vels[b])
        omega = state.ang_vels[b]
        torque = -jnp.cross(omega, params.inertias[b] * omega)
        parts.append(jnp.concatenate([force, torque]))
    return jnp.concatenate(parts)


@dataclass(frozen=True)
class StepRecord:
    """Everything needed to replay one step exactly."""

    state: SceneState
    contacts: ContactSet
    b: jnp.ndarray
    lam: jnp.ndarray
    next_state: SceneState


@dataclass(frozen=True)
class Trajectory:
    """States x_0..x_T plus the T actions that produced them."""

    states: tuple
    actions: tuple

    def __len__(self) -> int:
        return len(self.states)

    @property
    def horizon(self) -> int:
        return len(self.actions)

    def positions(self, body: int = 0):
        return jnp.stack([s.positions[body] for s in self.states])

    def orientations(self, body: int = 0):
        return jnp.stack([s.orientations[body] for s in self.states])


def step(state: SceneState, action: ActionInput, params: PhysParams,
         model: SceneModel, h: float, want_record: bool = False):
    """One simulator step; returns ``next_state`` or ``(next_state, record)``."""
    if h <= 0:
        raise ValueError("timestep must be positive")
    act_vels = None
    if state.actuator_points is not None:
        act_vels = jnp.broadcast_to(jnp.asarray(action.actuator_vel),
                                    state.actuator_points.shape)
    contacts = geometry.generate_contacts(
        list(model.clouds), state.poses(), model.sdf, plane=model.plane,
        actuator_points=state.actuator_points, actuator_vels=act_vels)

    tau = external_wrench(state, action, params, g=model.gravity)
    minv = params.inv_mass_diag()
    v = state.stacked_velocity()
    b = v + h * minv * tau

    if len(contacts) > 0:
        dual = dual_cone_stack(contacts, params.mu, model.n_d)
        lam = contact_impulse(b, dual, params, h)
        v_new = b + h * minv * (dual.jtilde.T @ lam)
    else:
        lam = jnp.zeros(0)
        v_new = b

    nb = state.num_bodies
    v_new_b = v_new.reshape(nb, 6)
    lin = v_new_b[:, :3]
    ang = v_new_b[:, 3:]
    positions = state.positions + h * lin
    orientations = jnp.stack([
        quat_exp_integrate(state.orientations[i], ang[i], h) for i in range(nb)])
    act_pts = None
    if state.actuator_points is not None:
        act_pts = state.actuator_points + h * act_vels
    next_state = SceneState(positions, orientations, lin, ang,
                            actuator_points=act_pts, actuator_vels=act_vels)
    if not next_state.is_finite():
        raise NumericalError("non-finite state after simulation step")
    if want_record:
        return next_state, StepRecord(state, contacts, b, lam, next_state)
    return next_state


def rollout(x0: SceneState, actions, params: PhysParams, model: SceneModel,
            h: float, want_records: bool = False):
    """Run T sequential steps; returns a Trajectory (and records if asked)."""
    if len(actions) < 1:
        raise ValueError("rollout needs at least one action")
    states = [x0]
    records = []
    for t, a in enumerate(actions):
        try:
            if want_records:
                nxt, rec = step(states[-1], a, params, model, h, want_record=True)
                records.append(rec)
            else:
                nxt = step(states[-1], a, params, model, h)
        except NumericalError as e:
            raise NumericalError("step %d: %s" % (t, e)) from e
        states.append(nxt)
    traj = Trajectory(states=tuple(states), actions=tuple(actions))
    if want_records:
        return traj, records
    return traj


def free_state(position, velocity=(0.0, 0.0, 0.0), orientation=None,
               ang_vel=(0.0, 0.0, 0.0), actuator_points=None) -> SceneState:
    """Convenience constructor for a single-body state."""
    from .spatial import QUAT_IDENTITY

    q = QUAT_IDENTITY if orientation is None else jnp.asarray(orientation)
    pts = None if actuator_points is None else jnp.atleast_2d(jnp.asarray(actuator_points))
    return SceneState(
        positions=jnp.asarray(position, dtype=jnp.float64)[None, :],
        orientations=q[None, :],
        lin_vels=jnp.asarray(velocity, dtype=jnp.float64)[None, :],
        ang_vels=jnp.asarray(ang_vel, dtype=jnp.float64)[None, :],
        actuator_points=pts,
        actuator_vels=None if pts is None else jnp.zeros_like(pts),
    )


# ---------------------------------------------------------------------------
# Fast path: branch-free masked step for one body + plane + actuator points.
#
# The reference step above builds per-contact records through python control
# flow, which is exact but slow and cannot be jit-compiled.  The desk-scale
# scenarios (fall-and-rebound, push-slide-settle, MPC pushing) are all one
# dynamic body over the ground plane with an optional kinematic pusher, so
# this path recomputes the identical math with fixed-size candidate buffers
# and activation masks: every sphere is a plane-contact candidate and every
# actuator point a pusher-contact candidate, inactive ones contribute an
# exactly zero force.  A consistency test pins it to the reference step.
# ---------------------------------------------------------------------------

from jax.scipy.special import logsumexp as _logsumexp

from .spatial import quat_to_matrix as _quat_to_matrix


def _fan(n, n_d):
    """(n_d, 3) tangent fan; same construction as spatial.tangent_basis."""
    return jnp.stack(tangent_basis(n, n_d))


def build_fast_step(model: SceneModel, num_points: int):
    """Build the branch-free single-body step function for ``model``.

    Returns ``step_fn(pos, quat, linvel, angvel, act_pts, act_vel, phys_raw,
    centers, log_scales, h)`` where ``phys_raw`` is the flat array
    ``[mass_raw, inertia_raw(3), mu_raw, k_raw, d_raw]``.  Suitable for
    ``jax.jit`` and arbitrary differentiation.
    """
    if model.num_bodies != 1:
        raise ValueError("fast path supports exactly one dynamic body")
    if model.plane is None:
        raise ValueError("fast path requires a ground plane")
    sdf = model.sdf
    n_pl = model.plane.normal
    offset = model.plane.offset
    n_d = model.n_d
    g = model.gravity
    plane_fan = _fan(n_pl, n_d)          # constant fan for the plane normal

    def soft_phi(p, cw, radii):
        d = jnp.linalg.norm(p - cw, axis=1) - radii
        phi_soft = -_logsumexp(-sdf.beta * d) / sdf.beta
        s = jax.nn.sigmoid(sdf.gamma * phi_soft)
        return jnp.maximum(s * phi_soft + (1.0 - s) * (-sdf.delta), -sdf.delta)

    def step_fn(pos, quat, linvel, angvel, act_pts, act_vel,
                phys_raw, centers, log_scales, h):
        mass = jnp.exp(phys_raw[0])
        inertia = jnp.exp(phys_raw[1:4])
        mu = MU_MAX * jnp.tanh(jnp.exp(phys_raw[4]) / MU_MAX)
        stiff = jnp.exp(phys_raw[5])
        damp = jnp.exp(phys_raw[6])
        radii = 2.0 * jnp.exp(log_scales)

        R = _quat_to_matrix(quat)
        cw = centers @ R.T + pos

        def ang_block(p_c):
            r_b = R.T @ (p_c - pos)
            return -R @ jnp.array([
                [0.0, -r_b[2], r_b[1]],
                [r_b[2], 0.0, -r_b[0]],
                [-r_b[1], r_b[0], 0.0],
            ])

        rows, phis, bias, masks = [], [], [], []

        # Plane candidates: one per sphere, closed form.
        phi_pl = cw @ n_pl - offset - radii
        witness_pl = cw - radii[:, None] * n_pl
        dirs_pl = n_pl[None, :] - mu * plane_fan          # (n_d, 3)
        for i in range(centers.shape[0]):
            ab = ang_block(witness_pl[i])
            rows.append(jnp.concatenate(
                [dirs_pl, dirs_pl @ ab], axis=1))          # (n_d, 6)
            phis.append(jnp.repeat(phi_pl[i], n_d))
            bias.append(jnp.zeros(n_d))
            masks.append(jnp.repeat(phi_pl[i] < sdf.margin, n_d))

        # Actuator candidates: one per query point, via the soft SDF.
        if num_points > 0:
            phi_act, grads = jax.vmap(
                jax.value_and_grad(lambda p: soft_phi(p, cw, radii)))(act_pts)
            norms = jnp.linalg.norm(grads, axis=1)
            normals = grads / jnp.maximum(norms, 1e-12)[:, None]
            p_cs = act_pts - phi_act[:, None] * normals
            for k in range(num_points):
                n_k = normals[k]
                dirs = n_k[None, :] - mu * _fan(n_k, n_d)
                ab = ang_block(p_cs[k])
                # Body is the B side: its blocks enter with a minus sign.
                rows.append(jnp.concatenate(
                    [-dirs, -(dirs @ ab)], axis=1))
                phis.append(jnp.repeat(phi_act[k], n_d))
                bias.append(dirs @ act_vel)
                masks.append(jnp.repeat(phi_act[k] < sdf.margin, n_d))

        jt = jnp.concatenate(rows)
        phit = jnp.concatenate(phis)
        bt = jnp.concatenate(bias)
        mask = jnp.concatenate(masks).astype(jt.dtype)

        omega = angvel
        tau = jnp.concatenate([
            jnp.array([0.0, 0.0, -mass * g]),
            -jnp.cross(omega, inertia * omega),
        ])
        minv = jnp.concatenate([jnp.repeat(1.0 / mass, 3), 1.0 / inertia])
        v = jnp.concatenate([linvel, angvel])
        b = v + h * minv * tau

        vel_rows = jt @ b + bt
        lam = mask * jax.nn.softplus(-stiff * (h * vel_rows + phit) - damp * vel_rows)
        v_new = b + h * minv * (jt.T @ lam)

        lin, ang = v_new[:3], v_new[3:]
        return (pos + h * lin,
                quat_exp_integrate(quat, ang, h),
                lin, ang,
                act_pts + h * act_vel)

    return step_fn


def build_fast_rollout(model: SceneModel, num_points: int, jit: bool = True):
    """Scan ``build_fast_step`` over an action sequence.

    Returns ``rollout_fn(x0_arrays, act_vels (T, 3), phys_raw, centers,
    log_scales, h) -> stacked state arrays`` with leading axis T+1.
    """
    step_fn = build_fast_step(model, num_points)

    def rollout_fn(pos, quat, linvel, angvel, act_pts, act_vels,
                   phys_raw, centers, log_scales, h):
        def body(carry, act_vel):
            nxt = step_fn(*carry, act_vel, phys_raw, centers, log_scales, h)
            return nxt, nxt

        init = (pos, quat, linvel, angvel, act_pts)
        _, ys = jax.lax.scan(body, init, act_vels)
        return tuple(jnp.concatenate([init[i][None], ys[i]]) for i in range(5))

    return jax.jit(rollout_fn) if jit else rollout_fn


def state_to_arrays(state: SceneState, num_points: int):
    """Single-body SceneState -> the flat arrays the fast path consumes."""
    pts = state.actuator_points
    if pts is None:
        pts = jnp.zeros((num_points, 3))
    return (state.positions[0], state.orientations[0],
            state.lin_vels[0], state.ang_vels[0], pts)


def arrays_to_states(arrays, act_vels=None):
    """Stacked fast-path outputs -> a list of single-body SceneStates."""
    pos, quat, lin, ang, pts = arrays
    out = []
    for t in range(pos.shape[0]):
        vel = None
        if act_vels is not None:
            vel = jnp.broadcast_to(
                act_vels[min(t, act_vels.shape[0] - 1)], pts[t].shape)
        out.append(SceneState(pos[t][None], quat[t][None],
                              lin[t][None], ang[t][None],
                              actuator_points=pts[t] if pts.shape[1] else None,
                              actuator_vels=vel))
    return out
