"""Sphere-cloud collision geometry.

A body's collision shape is a union of isotropic spheres (body-frame centers
plus per-sphere scales, radius = 2 x scale).  The signed distance to the union
is smoothed with a LogSumExp soft minimum and blended toward a constant
penetration floor ``-delta`` inside the shape, keeping the whole field smooth
in the query point, the sphere parameters, and the body pose.

Contact generation covers three pair kinds:

* body vs analytic ground plane (per-sphere closed form),
* body vs body (sphere centers queried against the other cloud's soft SDF,
  symmetrically, after a bounding-sphere broadphase),
* kinematic actuator query points vs body.

Each returned contact carries a 3 x (6B) Jacobian mapping the stacked
generalized velocity ``[v_1, w_1, ..., v_B, w_B]`` (world linear, body
angular) to the witness-point relative velocity in the contact frame
(row 0 = normal, rows 1-2 = orthogonal tangents).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import jax
import jax.numpy as jnp
import numpy as np
from jax.scipy.special import logsumexp

from .spatial import Pose, tangent_basis

PLANE_ID = -1
ACTUATOR_ID = -2


class DegenerateGradientError(ValueError):
    """Raised when the SDF gradient vanishes at a query (symmetry center)."""


@dataclass(frozen=True)
class SphereCloud:
    """Body-frame sphere primitives: centers (N, 3) and scales (N,), meters.

    Radii are always derived as ``2 * scales`` so the scales stay the single
    source of truth.
    """

    centers: jnp.ndarray
    scales: jnp.ndarray

    def __post_init__(self):
        object.__setattr__(self, "centers", jnp.atleast_2d(jnp.asarray(self.centers, dtype=jnp.float64)))
        object.__setattr__(self, "scales", jnp.atleast_1d(jnp.asarray(self.scales, dtype=jnp.float64)))
        if self.centers.shape[0] != self.scales.shape[0] or self.centers.shape[1] != 3:
            raise ValueError("centers must be (N, 3) and scales (N,)")
        if self.centers.shape[0] < 1:
            raise ValueError("a sphere cloud needs at least one sphere")

    @property
    def radii(self):
        return 2.0 * self.scales

    @property
    def num_spheres(self) -> int:
        return int(self.centers.shape[0])

    def bounding_sphere(self):
        """(center, radius) of a body-frame bounding sphere, for broadphase."""
        mid = jnp.mean(self.centers, axis=0)
        reach = jnp.linalg.norm(self.centers - mid, axis=1) + self.radii
        return mid, jnp.max(reach)


@dataclass(frozen=True)
class SoftSdfParams:
    """Soft-SDF shaping constants and contact bookkeeping limits."""

    beta: float = 200.0       # 1/m, LSE sharpness
    gamma: float = 200.0      # 1/m, sigmoid sharpness of the floor blend
    delta: float = 0.05       # m, penetration floor
    margin: float = 0.01      # m, contact activation distance
    max_contacts_per_pair: int = 8

    def __post_init__(self):
        if min(self.beta, self.gamma, self.delta, self.margin) <= 0:
            raise ValueError("beta, gamma, delta, margin must all be positive")


@dataclass(frozen=True)
class PlaneGeom:
    """Ground plane: points x with dot(normal, x) = offset are on the surface."""

    normal: jnp.ndarray = field(default_factory=lambda: jnp.array([0.0, 0.0, 1.0]))
    offset: float = 0.0

    def __post_init__(self):
        n = jnp.asarray(self.normal, dtype=jnp.float64)
        if abs(float(jnp.linalg.norm(n)) - 1.0) > 1e-6:
            raise ValueError("plane normal must be unit length")
        object.__setattr__(self, "normal", n)


def soft_min_distance(cloud: SphereCloud, pose: Pose, p, params: SoftSdfParams):
    """LogSumExp-smoothed minimum distance from world point ``p`` to the cloud."""
    centers_w = pose.apply_many(cloud.centers)
    d = jnp.linalg.norm(jnp.asarray(p) - centers_w, axis=1) - cloud.radii
    return -logsumexp(-params.beta * d) / params.beta


def blended_distance(phi_soft, params: SoftSdfParams):
    """Sigmoid blend of the soft distance toward the constant floor ``-delta``.

    The convex blend undershoots the floor by up to ``exp(-gamma delta) /
    (gamma e)`` when ``phi_soft < -delta``, so the result is clamped; the
    clamp only engages where the blend gradient is already negligible.
    """
    s = jax.nn.sigmoid(params.gamma * phi_soft)
    return jnp.maximum(s * phi_soft + (1.0 - s) * (-params.delta),
                       -params.delta)


def signed_distance(cloud: SphereCloud, pose: Pose, p, params: SoftSdfParams):
    """Blended soft signed distance at a world point (the field used everywhere)."""
    return blended_distance(soft_min_distance(cloud, pose, p, params), params)


def surface_projection(cloud: SphereCloud, pose: Pose, p, params: SoftSdfParams):
    """Project a world point onto the cloud surface along the SDF gradient.

    Returns ``(p_c, n)`` with ``n`` the normalized SDF gradient (outward
    surface normal) and ``p_c = p - phi(p) n``.  Raises
    :class:`DegenerateGradientError` when the gradient vanishes (query at an
    exact symmetry center); callers perturb by 1e-7 m and retry once.
    """
    p = jnp.asarray(p, dtype=jnp.float64)
    phi, grad = jax.value_and_grad(
        lambda q: signed_distance(cloud, pose, q, params))(p)
    norm = jnp.linalg.norm(grad)
    # The comparison is False for NaN (query at an exact sphere center), so
    # test non-finiteness explicitly.  Skipped under tracing, where the
    # concrete value is unavailable; traced callers keep queries off centers.
    if not isinstance(norm, jax.core.Tracer) and (
            not bool(jnp.isfinite(norm)) or float(norm) <= 1e-8):
        raise DegenerateGradientError(
            "SDF gradient vanished at query point %s" % np.asarray(p))
    n = grad / norm
    return p - phi * n, n


@dataclass(frozen=True)
class Contact:
    """One contact record.

    ``normal`` points from ``body_b`` into ``body_a``; ``jac`` maps the
    stacked generalized velocity to the witness-point relative velocity
    (A minus B) in the contact frame.  ``rhs_vel`` is the prescribed world
    witness velocity contributed by a kinematic participant (signed as its
    share of the A-minus-B relative velocity), zero otherwise.
    """

    point: jnp.ndarray
    normal: jnp.ndarray
    phi: jnp.ndarray
    body_a: int
    body_b: int
    jac: jnp.ndarray
    frame: jnp.ndarray          # rows: normal, tangent 1, tangent 2 (world)
    rhs_vel: jnp.ndarray = field(default_factory=lambda: jnp.zeros(3))


@dataclass(frozen=True)
class ContactSet:
    contacts: tuple
    num_bodies: int

    def __len__(self) -> int:
        return len(self.contacts)

    def __iter__(self):
        return iter(self.contacts)


def _skew(v):
    return jnp.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def _point_velocity_blocks(p_c, pose: Pose):
    """World witness-point velocity as [I, -R [r_b]x] acting on [v, w_body]."""
    from .spatial import quat_to_matrix

    R = quat_to_matrix(pose.orientation)
    r_body = R.T @ (p_c - pose.position)
    return jnp.eye(3), -R @ _skew(r_body)


def _contact_jacobian(frame, p_c, poses, body_a, body_b, num_bodies):
    """3 x (6B) contact-frame Jacobian of the relative witness velocity."""
    jac = jnp.zeros((3, 6 * num_bodies))
    if body_a >= 0:
        lin, ang = _point_velocity_blocks(p_c, poses[body_a])
        jac = jac.at[:, 6 * body_a:6 * body_a + 3].add(frame @ lin)
        jac = jac.at[:, 6 * body_a + 3:6 * body_a + 6].add(frame @ ang)
    if body_b >= 0:
        lin, ang = _point_velocity_blocks(p_c, poses[body_b])
        jac = jac.at[:, 6 * body_b:6 * body_b + 3].add(-frame @ lin)
        jac = jac.at[:, 6 * body_b + 3:6 * body_b + 6].add(-frame @ ang)
    return jac


def _contact_frame(n):
    t1, t2 = tangent_basis(n, 4)[:2]
    return jnp.stack([n, t1, t2])


def _make_contact(p_c, n, phi, body_a, body_b, poses, num_bodies, rhs_vel=None):
    frame = _contact_frame(n)
    jac = _contact_jacobian(frame, p_c, poses, body_a, body_b, num_bodies)
    return Contact(
        point=p_c, normal=n, phi=phi, body_a=body_a, body_b=body_b,
        jac=jac, frame=frame,
        rhs_vel=jnp.zeros(3) if rhs_vel is None else jnp.asarray(rhs_vel),
    )


def _projection_with_retry(cloud, pose, p, params):
    try:
        return surface_projection(cloud, pose, p, params)
    except DegenerateGradientError:
        return surface_projection(cloud, pose, jnp.asarray(p) + 1e-7, params)


def _cap_deepest(candidates, cap):
    """Keep the ``cap`` deepest candidates; ties broken by insertion index."""
    order = sorted(range(len(candidates)), key=lambda i: (float(candidates[i].phi), i))
    return [candidates[i] for i in order[:cap]]


def generate_contacts(clouds, poses, params: SoftSdfParams,
                      plane: PlaneGeom | None = None,
                      actuator_points=None, actuator_vels=None) -> ContactSet:
    """Generate the capped contact set for one scene configuration.

    ``clouds``/``poses`` are parallel per-body lists.  ``actuator_points`` is
    an optional (P, 3) array of kinematic query points with world velocities
    ``actuator_vels`` (P, 3).  Which candidates are active (margin test, cap
    ordering) is decided on concrete values; the retained contacts stay
    differentiable in poses and sphere parameters.
    """
    num_bodies = len(clouds)
    contacts = []

    if plane is not None:
        n_pl = plane.normal
        for ib, (cloud, pose) in enumerate(zip(clouds, poses)):
            centers_w = pose.apply_many(cloud.centers)
            dists = centers_w @ n_pl - plane.offset - cloud.radii
            cand = []
            for i in range(cloud.num_spheres):
                if float(dists[i]) < params.margin:
                    p_c = centers_w[i] - cloud.radii[i] * n_pl
                    cand.append(_make_contact(
                        p_c, n_pl, dists[i], ib, PLANE_ID, poses, num_bodies))
            contacts.extend(_cap_deepest(cand, params.max_contacts_per_pair))

    for ia in range(num_bodies):
        for ib in range(ia + 1, num_bodies):
            if not _broadphase_overlap(clouds[ia], poses[ia],
                                       clouds[ib], poses[ib], params.margin):
                continue
            cand = []
            cand.extend(_sphere_vs_cloud(clouds[ia], poses[ia], ia,
                                         clouds[ib], poses[ib], ib,
                                         poses, num_bodies, params))
            cand.extend(_sphere_vs_cloud(clouds[ib], poses[ib], ib,
                                         clouds[ia], poses[ia], ia,
                                         poses, num_bodies, params))
            contacts.extend(_cap_deepest(cand, params.max_contacts_per_pair))

    if actuator_points is not None and len(actuator_points) > 0:
        pts = jnp.atleast_2d(jnp.asarray(actuator_points))
        vels = (jnp.zeros_like(pts) if actuator_vels is None
                else jnp.atleast_2d(jnp.asarray(actuator_vels)))
        for ib, (cloud, pose) in enumerate(zip(clouds, poses)):
            cand = []
            for k in range(pts.shape[0]):
                phi = signed_distance(cloud, pose, pts[k], params)
                if float(phi) < params.margin:
                    p_c, n_out = _projection_with_retry(cloud, pose, pts[k], params)
                    # Outward normal of the body points from body into the
                    # actuator point: body is the B side of the convention.
                    cand.append(_make_contact(
                        p_c, n_out, phi, ACTUATOR_ID, ib, poses, num_bodies,
                        rhs_vel=vels[k]))
            contacts.extend(_cap_deepest(cand, params.max_contacts_per_pair))

    return ContactSet(contacts=tuple(contacts), num_bodies=num_bodies)


def _broadphase_overlap(cloud_a, pose_a, cloud_b, pose_b, margin):
    ca, ra = cloud_a.bounding_sphere()
    cb, rb = cloud_b.bounding_sphere()
    gap = jnp.linalg.norm(pose_a.apply(ca) - pose_b.apply(cb)) - ra - rb
    return float(gap) < margin


def _sphere_vs_cloud(cloud_q, pose_q, iq, cloud_t, pose_t, it,
                     poses, num_bodies, params):
    """Query the spheres of one body against the soft SDF of the other.

    The query body takes the A role: the target's outward surface normal
    already points from the target (B) into the query body (A).
    """
    centers_w = pose_q.apply_many(cloud_q.centers)
    out = []
    for i in range(cloud_q.num_spheres):
        phi = signed_distance(cloud_t, pose_t, centers_w[i], params) - cloud_q.radii[i]
        if float(phi) < params.margin:
            p_c, n = _projection_with_retry(cloud_t, pose_t, centers_w[i], params)
            out.append(_make_contact(p_c, n, phi, iq, it, poses, num_bodies))
    return out


# ---------------------------------------------------------------------------
# Sphere-cloud fitting from point clouds
# ---------------------------------------------------------------------------

def farthest_point_sample(points, count, seed=0):
    """Classic FPS over an (P, 3) array; returns the selected indices."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.shape[0] < count:
        raise ValueError("need at least as many points as samples")
    rng = np.random.RandomState(seed)
    idx = [int(rng.randint(pts.shape[0]))]
    d = np.linalg.norm(pts - pts[idx[0]], axis=1)
    for _ in range(count - 1):
        nxt = int(np.argmax(d))
        idx.append(nxt)
        d = np.minimum(d, np.linalg.norm(pts - pts[nxt], axis=1))
    return np.array(idx)


def fit_sphere_cloud(points, num_spheres, iters=400,
                     params: SoftSdfParams | None = None,
                     seed=0, lr=5e-3) -> SphereCloud:
    """Fit a sphere cloud to a surface point cloud.

    Centers start at farthest-point samples, scales at half the mean distance
    to the 8 nearest input points; both are then refined by Adam on the mean
    absolute blended distance of the input points.  Deterministic given the
    seed.
    """
    params = params or SoftSdfParams()
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError("points must be (P, 3)")
    if float(np.max(np.linalg.norm(pts - pts.mean(axis=0), axis=1))) < 1e-12:
        raise ValueError("degenerate point cloud: all points coincide")

    idx = farthest_point_sample(pts, num_spheres, seed=seed)
    centers = jnp.asarray(pts[idx])
    k = min(8, pts.shape[0])
    d2 = np.linalg.norm(pts[idx][:, None, :] - pts[None, :, :], axis=2)
    knn = np.sort(d2, axis=1)[:, :k]
    scales = jnp.asarray(np.maximum(0.5 * knn.mean(axis=1), 1e-4))

    pts_j = jnp.asarray(pts)

    def objective(theta):
        c = theta[:3 * num_spheres].reshape(num_spheres, 3)
        s = jnp.exp(theta[3 * num_spheres:])
        cloud = SphereCloud(c, s)
        # Fit against the raw soft distance: the penetration floor is a
        # dynamics device and would bias the fitted radii outward.  The norm
        # is regularized because centers start exactly on input points.
        def phi_at(p):
            d = jnp.sqrt(jnp.sum((p - c) ** 2, axis=1) + 1e-16) - 2.0 * s
            return -logsumexp(-params.beta * d) / params.beta

        return jnp.mean(jnp.abs(jax.vmap(phi_at)(pts_j)))

    theta = jnp.concatenate([centers.ravel(), jnp.log(scales)])
    grad_fn = jax.grad(objective)
    m = jnp.zeros_like(theta)
    v = jnp.zeros_like(theta)
    for t in range(1, iters + 1):
        g = grad_fn(theta)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        mh = m / (1.0 - 0.9 ** t)
        vh = v / (1.0 - 0.999 ** t)
        theta = theta - lr * mh / (jnp.sqrt(vh) + 1e-8)

    return SphereCloud(theta[:3 * num_spheres].reshape(num_spheres, 3),
                       jnp.exp(theta[3 * num_spheres:]))


# ---------------------------------------------------------------------------
# Plain-text serialization
# ---------------------------------------------------------------------------

def save_sphere_cloud(path, cloud: SphereCloud) -> None:
    """Write the documented table: count header, then ``cx cy cz s`` rows."""
    with open(path, "w") as f:
        f.write("%d\n" % cloud.num_spheres)
        for c, s in zip(np.asarray(cloud.centers), np.asarray(cloud.scales)):
            f.write("%.17g %.17g %.17g %.17g\n" % (c[0], c[1], c[2], s))


def load_sphere_cloud(path) -> SphereCloud:
    with open(path) as f:
        count = int(f.readline().split()[0])
        rows = [[float(x) for x in f.readline().split()] for _ in range(count)]
    arr = np.asarray(rows)
    return SphereCloud(arr[:, :3], arr[:, 3])


def load_xyz(path):
    """Read a standard XYZ text point cloud (3 floats per line)."""
    pts = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            vals = line.split()
            pts.append([float(vals[0]), float(vals[1]), float(vals[2])])
    return np.asarray(pts)
