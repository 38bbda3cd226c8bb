"""Differentiable sphere-splat silhouette renderer.

Each sphere projects to an isotropic 2D Gaussian at the pinhole projection of
its center; pixels composite the splats order-free as
``1 - prod_i (1 - alpha g_i)``.  The map from body pose to image is smooth,
which is all the identification losses need.  No color, no depth sorting, no
occlusion between bodies.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import jax.numpy as jnp
import numpy as np

from .geometry import SphereCloud
from .spatial import Pose

ALPHA = 0.95          # peak splat opacity
PSNR_CAP_DB = 99.0
MIN_DEPTH = 1e-4      # m; spheres at or behind this are skipped


@dataclass(frozen=True)
class Camera:
    """Pinhole intrinsics plus world-to-camera pose (camera looks along +z)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    t_cw: Pose = field(default_factory=Pose.identity)

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width < 8 or self.height < 8:
            raise ValueError("image must be at least 8x8")

    @staticmethod
    def looking_down(height_m: float, width: int = 64, height: int = 64,
                     fov_scale: float = 1.5) -> Camera:
        """Overhead camera centered above the origin at the given height."""
        from .spatial import quat_normalize

        # Rotate camera +z to point along world -z (x stays aligned).
        q = quat_normalize(jnp.array([0.0, 1.0, 0.0, 0.0]))
        t_cw = Pose(jnp.zeros(3), q).compose(
            Pose(jnp.array([0.0, 0.0, -height_m]), jnp.array([1.0, 0.0, 0.0, 0.0])))
        f = fov_scale * width
        return Camera(fx=f, fy=f, cx=width / 2.0, cy=height / 2.0,
                      width=width, height=height, t_cw=t_cw)


def transform_cloud(cloud: SphereCloud, pose: Pose) -> SphereCloud:
    """Rigidly move a cloud into the world frame; scales are untouched."""
    return SphereCloud(pose.apply_many(cloud.centers), cloud.scales)


def splat_silhouette(cloud: SphereCloud, camera: Camera):
    """Composite a world-frame cloud into an (H, W) occupancy image in [0, 1]."""
    centers_cam = camera.t_cw.apply_many(cloud.centers)
    depth = centers_cam[:, 2]
    visible = depth > MIN_DEPTH
    safe_depth = jnp.where(visible, depth, 1.0)
    u = camera.fx * centers_cam[:, 0] / safe_depth + camera.cx
    v = camera.fy * centers_cam[:, 1] / safe_depth + camera.cy
    sigma = 0.5 * camera.fx * cloud.radii / safe_depth

    us = jnp.arange(camera.width, dtype=jnp.float64) + 0.5
    vs = jnp.arange(camera.height, dtype=jnp.float64) + 0.5
    du = us[None, None, :] - u[:, None, None]          # (N, 1, W)
    dv = vs[None, :, None] - v[:, None, None]          # (N, H, 1)
    rho_sq = du * du + dv * dv
    g = ALPHA * jnp.exp(-rho_sq / (2.0 * jnp.maximum(sigma, 1e-9)[:, None, None] ** 2))
    g = jnp.where(visible[:, None, None], g, 0.0)
    # Order-free compositing in log space.
    return 1.0 - jnp.exp(jnp.sum(jnp.log1p(-g), axis=0))


def render_state(cloud: SphereCloud, pose: Pose, camera: Camera):
    """Convenience: forward-kinematics transform then splat."""
    return splat_silhouette(transform_cloud(cloud, pose), camera)


def psnr(a, b) -> jnp.ndarray:
    """-10 log10(MSE) in dB, capped at 99 dB for (near-)identical images."""
    a = jnp.asarray(a)
    b = jnp.asarray(b)
    if a.shape != b.shape:
        raise ValueError("image dimensions differ: %s vs %s" % (a.shape, b.shape))
    mse = jnp.mean((a - b) ** 2)
    return jnp.where(mse < 1e-10, PSNR_CAP_DB, -10.0 * jnp.log10(jnp.maximum(mse, 1e-300)))


def save_pgm(path, image) -> None:
    """Write an occupancy image as plain-text PGM (P2, maxval 255)."""
    arr = np.asarray(image)
    pix = np.clip(np.rint(arr * 255.0), 0, 255).astype(int)
    with open(path, "w") as f:
        f.write("P2\n%d %d\n255\n" % (arr.shape[1], arr.shape[0]))
        for row in pix:
            f.write(" ".join(str(p) for p in row) + "\n")


def load_pgm(path):
    with open(path) as f:
        tokens = []
        for line in f:
            hash_pos = line.find("#")
            if hash_pos >= 0:
                line = line[:hash_pos]
            tokens.extend(line.split())
    if tokens[0] != "P2":
        raise ValueError("only plain-text P2 PGM is supported")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    data = np.asarray([int(t) for t in tokens[4:4 + w * h]], dtype=np.float64)
    return (data / maxval).reshape(h, w)
