"""Quaternion / SE(3) algebra shared by every other module.

Conventions:
    - Quaternions are length-4 arrays ``[w, x, y, z]`` with Hamilton product.
    - ``q`` rotates body vectors into the world: ``v_w = R(q) v_b``.
    - Angular velocity lives in the body frame; linear velocity in the world
      frame (keeps the inertia tensor constant per body).
    - ``q`` and ``-q`` denote the same rotation; comparisons use ``|dot|``.

All functions are pure and operate on ``jax.numpy`` arrays, so they are
differentiable and safe to call from any number of workers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import jax
import jax.numpy as jnp

QUAT_IDENTITY = jnp.array([1.0, 0.0, 0.0, 0.0])


def quat_normalize(q):
    return q / jnp.linalg.norm(q)


def quat_multiply(a, b):
    """Hamilton product a ⊗ b."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return jnp.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conjugate(q):
    return jnp.stack([q[0], -q[1], -q[2], -q[3]])


def quat_to_matrix(q):
    """Rotation matrix R(q) mapping body to world, for unit q."""
    w, x, y, z = q
    return jnp.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quat_rotate(q, v):
    return quat_to_matrix(q) @ v


def quat_exp(rotvec):
    """Exact quaternion exponential of half a rotation vector.

    Returns the unit quaternion for a rotation of ``‖rotvec‖`` radians about
    ``rotvec``.  The ``sin(θ/2)/θ`` factor is evaluated by series near zero so
    the map stays smooth (and differentiable) through ω = 0.
    """
    theta_sq = jnp.dot(rotvec, rotvec)
    small = theta_sq < 1e-12
    # Double-where keeps the untaken branch finite under differentiation.
    theta = jnp.sqrt(jnp.where(small, 1.0, theta_sq))
    half = 0.5 * theta
    # sin(θ/2)/θ; series below the switch point keeps derivatives exact.
    k = jnp.where(small, 0.5 - theta_sq / 48.0, jnp.sin(half) / theta)
    w = jnp.where(small, 1.0 - theta_sq / 8.0, jnp.cos(half))
    return quat_normalize(jnp.concatenate([w[None], k * rotvec]))


def quat_exp_integrate(q, omega_body, h):
    """Advance orientation by body angular velocity over a step: q ⊗ exp(h ω / 2)."""
    return quat_normalize(quat_multiply(q, quat_exp(h * jnp.asarray(omega_body))))


def quat_angle_between(qa, qb):
    """Geodesic angle between two unit quaternions, double-cover aware."""
    d = jnp.clip(jnp.abs(jnp.dot(qa, qb)), 0.0, 1.0)
    return 2.0 * jnp.arccos(d)


def tangent_basis(n, n_d: int = 4):
    """Even fan of ``n_d`` unit tangent vectors in the plane orthogonal to ``n``.

    The seed axis is the coordinate axis least aligned with ``n`` (ties broken
    x -> y -> z), which makes the fan deterministic.  Consecutive directions
    differ by 2π/n_d about ``n``.
    """
    n = jnp.asarray(n, dtype=jnp.float64)
    if n_d < 2 or n_d % 2 != 0:
        raise ValueError("n_d must be even and >= 2")
    if not isinstance(n, jax.core.Tracer) and abs(float(jnp.linalg.norm(n)) - 1.0) > 1e-6:
        raise ValueError("tangent_basis requires a unit normal")
    # Seed axis selection is discrete by design (argmin returns the first
    # minimum, giving the x -> y -> z tie-break); gradients flow through the
    # projection below, not through the choice of axis.
    e = jax.nn.one_hot(jnp.argmin(jnp.abs(n)), 3, dtype=n.dtype)
    d0 = e - jnp.dot(e, n) * n
    d0 = d0 / jnp.linalg.norm(d0)
    d1 = jnp.cross(n, d0)
    dirs = []
    for i in range(n_d):
        ang = 2.0 * math.pi * i / n_d
        dirs.append(math.cos(ang) * d0 + math.sin(ang) * d1)
    return dirs


@dataclass(frozen=True)
class Pose:
    """Rigid transform: world position + body-to-world unit quaternion."""

    position: jnp.ndarray
    orientation: jnp.ndarray

    @staticmethod
    def identity() -> "Pose":
        return Pose(jnp.zeros(3), QUAT_IDENTITY)

    def apply(self, x):
        """Map a body-frame point to the world frame."""
        return quat_rotate(self.orientation, jnp.asarray(x)) + self.position

    def apply_many(self, xs):
        """Map an (N, 3) array of body-frame points to the world frame."""
        return jnp.asarray(xs) @ quat_to_matrix(self.orientation).T + self.position

    def inverse(self) -> "Pose":
        qc = quat_conjugate(self.orientation)
        return Pose(-quat_rotate(qc, self.position), qc)

    def compose(self, other: "Pose") -> "Pose":
        """self ∘ other: apply ``other`` first, then ``self``."""
        return Pose(
            self.apply(other.position),
            quat_normalize(quat_multiply(self.orientation, other.orientation)),
        )


def pose_compose(a: Pose, b: Pose) -> Pose:
    return a.compose(b)


def pose_apply(p: Pose, x):
    return p.apply(x)
