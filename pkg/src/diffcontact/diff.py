"""Reverse-mode gradients through rollouts, plus finite-difference checking.

The flat parameter vector groups named slices of unconstrained reals:

    mass, inertia, mu, K, D   -- log-parameterized physical properties
    centers, scales           -- sphere-cloud geometry (scales as logs)
    x0_pose, x0_vel           -- initial-state tangent (dp + rotation vector)
                                 and twist

Gradients are obtained by reverse accumulation through the step map: the
rollout is evaluated once forward with full per-step caching, then the
adjoint of each step is composed backward (jax's VJP machinery provides the
per-step adjoints; storage grows linearly in the horizon).  The independent
check is always plain central finite differences, implemented here without
touching the reverse pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import jax
import jax.numpy as jnp
import numpy as np

from .dynamics import (NumericalError, PhysParams, SceneModel, SceneState,
                       build_fast_rollout, state_to_arrays)
from .geometry import SphereCloud
from .spatial import quat_exp, quat_multiply, quat_normalize

SLICE_NAMES = ("mass", "inertia", "mu", "K", "D", "centers", "scales",
               "x0_pose", "x0_vel")


@dataclass
class ParamVector:
    """Named view over a flat unconstrained parameter vector.

    Holds base values for a single-body scene and exposes the selected free
    slices as one flat array; the remaining slices stay frozen at their base
    values.
    """

    phys: PhysParams
    cloud: SphereCloud
    x0: SceneState
    free: tuple = ("mass", "inertia", "mu", "K", "D")

    def __post_init__(self):
        unknown = set(self.free) - set(SLICE_NAMES)
        if unknown:
            raise ValueError("unknown parameter slices: %s" % sorted(unknown))
        if not self.free:
            raise ValueError("at least one parameter slice must be free")
        n = self.cloud.num_spheres
        sizes = {"mass": 1, "inertia": 3, "mu": 1, "K": 1, "D": 1,
                 "centers": 3 * n, "scales": n, "x0_pose": 6, "x0_vel": 6}
        self.layout = {}
        off = 0
        for name in SLICE_NAMES:
            if name in self.free:
                self.layout[name] = slice(off, off + sizes[name])
                off += sizes[name]
        self.size = off

    def theta(self):
        """Current values of the free slices as one flat array."""
        p = self.phys
        base = {
            "mass": p.mass_raw, "inertia": p.inertia_raw.ravel(),
            "mu": jnp.atleast_1d(p.mu_raw), "K": jnp.atleast_1d(p.k_raw),
            "D": jnp.atleast_1d(p.d_raw),
            "centers": self.cloud.centers.ravel(),
            "scales": jnp.log(self.cloud.scales),
            "x0_pose": jnp.zeros(6), "x0_vel": jnp.concatenate(
                [self.x0.lin_vels[0], self.x0.ang_vels[0]]),
        }
        return jnp.concatenate([base[name] for name in self.layout])

    def split(self, vec):
        """Split a flat array (theta or gradient) into named slices."""
        return {name: vec[sl] for name, sl in self.layout.items()}

    def unpack(self, theta):
        """theta -> (phys_raw (7,), centers (N,3), log_scales (N,), x0 arrays).

        ``phys_raw`` is ordered [mass, inertia(3), mu, K, D] in raw space as
        the fast step expects.
        """
        p = self.phys
        get = lambda name, frozen: (theta[self.layout[name]]
                                    if name in self.layout else frozen)
        phys_raw = jnp.concatenate([
            jnp.atleast_1d(get("mass", p.mass_raw[0])),
            get("inertia", p.inertia_raw.ravel()),
            jnp.atleast_1d(get("mu", p.mu_raw)),
            jnp.atleast_1d(get("K", p.k_raw)),
            jnp.atleast_1d(get("D", p.d_raw)),
        ])
        centers = get("centers", self.cloud.centers.ravel()).reshape(-1, 3)
        log_scales = get("scales", jnp.log(self.cloud.scales))

        pos = self.x0.positions[0]
        quat = self.x0.orientations[0]
        lin = self.x0.lin_vels[0]
        ang = self.x0.ang_vels[0]
        if "x0_pose" in self.layout:
            tangent = theta[self.layout["x0_pose"]]
            pos = pos + tangent[:3]
            quat = quat_normalize(quat_multiply(quat, quat_exp(tangent[3:])))
        if "x0_vel" in self.layout:
            tw = theta[self.layout["x0_vel"]]
            lin, ang = tw[:3], tw[3:]
        return phys_raw, centers, log_scales, (pos, quat, lin, ang)

    def to_phys(self, theta) -> PhysParams:
        phys_raw, _, _, _ = self.unpack(theta)
        return PhysParams(mass_raw=phys_raw[0:1],
                          inertia_raw=phys_raw[1:4][None, :],
                          mu_raw=phys_raw[4], k_raw=phys_raw[5],
                          d_raw=phys_raw[6])

    def to_cloud(self, theta) -> SphereCloud:
        _, centers, log_scales, _ = self.unpack(theta)
        return SphereCloud(centers, jnp.exp(log_scales))


@dataclass
class GradReport:
    """Loss value plus the gradient (and optional FD error) per named slice."""

    loss: float
    grads: dict
    fd_errors: dict = field(default_factory=dict)

    @property
    def max_fd_error(self) -> float:
        return max(self.fd_errors.values()) if self.fd_errors else float("nan")


def make_rollout_loss(pv: ParamVector, actions, model: SceneModel, h,
                      loss_fn, jit: bool = True):
    """Build ``theta -> loss`` for a scanned single-body rollout.

    ``loss_fn(pos, quat, lin, ang, act_pts, centers, scales) -> scalar``
    receives stacked trajectory arrays (leading axis T+1) plus the current
    geometry, so pose, silhouette, and geometry-regularizing losses all fit.
    """
    num_points = (0 if pv.x0.actuator_points is None
                  else int(pv.x0.actuator_points.shape[0]))
    roll = build_fast_rollout(model, num_points, jit=False)
    act_vels = jnp.asarray(actions)

    def total(theta):
        phys_raw, centers, log_scales, (pos, quat, lin, ang) = pv.unpack(theta)
        pts = pv.x0.actuator_points
        if pts is None:
            pts = jnp.zeros((0, 3))
        arrays = roll(pos, quat, lin, ang, pts, act_vels,
                      phys_raw, centers, log_scales, h)
        return loss_fn(*arrays, centers, jnp.exp(log_scales))

    return jax.jit(total) if jit else total


def rollout_grad(loss_fn, pv: ParamVector, actions, model: SceneModel, h,
                 check: bool = False, fd_rel_step: float = 1e-5,
                 jit: bool = True) -> GradReport:
    """Loss and gradient of a rollout objective over the free slices."""
    total = make_rollout_loss(pv, actions, model, h, loss_fn, jit=jit)
    theta = pv.theta()
    loss, grad = jax.value_and_grad(total)(theta)
    if not bool(jnp.isfinite(loss)):
        raise NumericalError("non-finite rollout loss")
    if not bool(jnp.all(jnp.isfinite(grad))):
        bad = pv.split(jnp.isfinite(grad))
        names = [k for k, v in bad.items() if not bool(jnp.all(v))]
        raise NumericalError("non-finite adjoint in slices %s" % names)
    report = GradReport(loss=float(loss), grads=pv.split(grad))
    if check:
        err = finite_difference_errors(total, theta, grad, rel_step=fd_rel_step)
        report.fd_errors = {k: float(jnp.max(v)) if v.size else 0.0
                            for k, v in pv.split(err).items()}
    return report


def central_difference(f, x, steps):
    """Per-coordinate central differences of a scalar function."""
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = steps[i]
        hi = float(f(jnp.asarray(x + e)))
        lo = float(f(jnp.asarray(x - e)))
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NumericalError("non-finite FD sample at coordinate %d" % i)
        out[i] = (hi - lo) / (2.0 * steps[i])
    return out


def finite_difference_errors(f, x, analytic, rel_step=1e-5, abs_step=None):
    """Relative error between an analytic gradient and central differences.

    Normalization uses ``max(|analytic|, |numeric|, 1e-12)`` per coordinate.
    """
    x = np.asarray(x, dtype=np.float64)
    if abs_step is not None:
        steps = np.full(x.size, abs_step)
    else:
        steps = rel_step * np.maximum(np.abs(x), 1.0)
    numeric = central_difference(f, x, steps)
    analytic = np.asarray(analytic, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
    return jnp.asarray(np.abs(analytic - numeric) / denom)


def grad_check(f, x, rel_step=1e-5, abs_step=None) -> float:
    """Max relative error between jax.grad(f) and central differences at x."""
    x = jnp.asarray(x, dtype=jnp.float64)
    analytic = jax.grad(f)(x)
    if not bool(jnp.all(jnp.isfinite(analytic))):
        raise NumericalError("non-finite analytic gradient")
    err = finite_difference_errors(f, x, analytic, rel_step=rel_step,
                                   abs_step=abs_step)
    return float(jnp.max(err))
