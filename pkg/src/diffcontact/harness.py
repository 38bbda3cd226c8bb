"""Scenario generation, on-disk formats, and run manifests.

Two self-consistency scenarios drive everything downstream:

``fall_and_rebound``     bodies released above the plane with randomized pose
                         and twist; short, impact-dominated clips.
``push_slide_settle``    a settled body pushed by a kinematic point at a
                         randomized speed; long, sliding-dominated clips.

Trajectories are CSV with ``#``-prefixed header lines and the row layout
``t, body, px, py, pz, qw, qx, qy, qz, vx, vy, vz, wx, wy, wz`` (SI units,
``%.17g`` floats, so round-trips are bitwise).  Pusher rows use body id -2
with the commanded velocity in the ``vx..vz`` columns.  Configs are YAML with
sorted keys; every run writes a JSON manifest holding the inputs, seed,
package versions, and wall time.
"""

from __future__ import annotations

import hashlib
import json
import os
import platform
import sys
from dataclasses import dataclass, field

import jax.numpy as jnp
import numpy as np
import yaml

from .dynamics import (PhysParams, SceneModel, SceneState, build_fast_rollout)
from .geometry import (ACTUATOR_ID, PlaneGeom, SoftSdfParams, SphereCloud,
                       load_sphere_cloud, save_sphere_cloud)
from .sysid import Dataset, ObservedSequence

SCENARIO_KINDS = ("fall_and_rebound", "push_slide_settle")
TRAJECTORY_VERSION = 1
CSV_COLUMNS = ("t", "body", "px", "py", "pz", "qw", "qx", "qy", "qz",
               "vx", "vy", "vz", "wx", "wy", "wz")
FLOAT_FMT = "%.17g"


def _check_range(name, r):
    lo, hi = float(r[0]), float(r[1])
    if not (np.isfinite(lo) and np.isfinite(hi) and lo <= hi):
        raise ValueError("range %s must be finite and ordered" % name)
    return (lo, hi)


@dataclass
class ScenarioConfig:
    """Everything needed to regenerate a dataset from its seed."""

    kind: str
    cloud: SphereCloud
    phys: PhysParams
    h: float = 0.005
    steps: int = 15
    num_train: int = 1
    num_test: int = 4
    test_steps: int | None = None          # defaults to ``steps``
    seed: int = 0
    sdf: SoftSdfParams = field(default_factory=lambda: SoftSdfParams(
        beta=2000.0, gamma=2000.0, delta=0.05, margin=0.01))
    drop_height: tuple = (0.002, 0.012)    # m above the rest height
    speed: tuple = (0.2, 0.6)              # m/s, initial planar speed
    spin: tuple = (-2.0, 2.0)              # rad/s about the vertical axis
    tilt: tuple = (0.0, 0.15)              # rad about a random horizontal axis
    pusher_speed: tuple = (0.05, 0.2)      # m/s, push scenario only
    pusher_gap: float = 0.002              # m between pusher and body surface

    def __post_init__(self):
        if self.kind not in SCENARIO_KINDS:
            raise ValueError("unknown scenario kind %r" % self.kind)
        if self.h <= 0 or self.steps < 1:
            raise ValueError("h must be positive and steps at least 1")
        if self.num_train < 1 or self.num_test < 0:
            raise ValueError("need at least one training sequence")
        if self.test_steps is not None and self.test_steps < 1:
            raise ValueError("test_steps must be at least 1 when given")
        if self.seed is None:
            raise ValueError("seed is mandatory")
        for name in ("drop_height", "speed", "spin", "tilt", "pusher_speed"):
            setattr(self, name, _check_range(name, getattr(self, name)))

    def model(self) -> SceneModel:
        return SceneModel(clouds=(self.cloud,), plane=PlaneGeom(), sdf=self.sdf)


def _phys_raw(phys: PhysParams):
    return jnp.concatenate([
        phys.mass_raw, phys.inertia_raw.ravel(),
        jnp.atleast_1d(phys.mu_raw), jnp.atleast_1d(phys.k_raw),
        jnp.atleast_1d(phys.d_raw)])


def rest_height(config: ScenarioConfig, settle_steps: int = 400):
    """Settle the body from a grazing start; returns (z, quat).

    The start height puts the lowest sphere 1 mm above the plane so the
    settling transient stays gentle (a high drop at stiff K can bounce).
    """
    roll = build_fast_rollout(config.model(), 0)
    touch = float(jnp.max(config.cloud.radii - config.cloud.centers[:, 2]))
    out = roll(jnp.array([0.0, 0.0, touch + 0.001]),
               jnp.array([1.0, 0.0, 0.0, 0.0]),
               jnp.zeros(3), jnp.zeros(3), jnp.zeros((0, 3)),
               jnp.zeros((settle_steps, 3)), _phys_raw(config.phys),
               config.cloud.centers, jnp.log(config.cloud.scales), config.h)
    return float(out[0][-1, 2]), out[1][-1]


def _sample_fall(config: ScenarioConfig, rng, rest_z, steps):
    from .spatial import quat_exp, quat_normalize

    z = rest_z + rng.uniform(*config.drop_height)
    theta = rng.uniform(0.0, 2.0 * np.pi)
    speed = rng.uniform(*config.speed)
    vel = jnp.array([speed * np.cos(theta), speed * np.sin(theta), 0.0])
    tilt = rng.uniform(*config.tilt)
    axis_angle = rng.uniform(0.0, 2.0 * np.pi)
    axis = jnp.array([np.cos(axis_angle), np.sin(axis_angle), 0.0])
    quat = quat_normalize(quat_exp(axis * tilt))
    spin = jnp.array([0.0, 0.0, rng.uniform(*config.spin)])
    x0 = SceneState(jnp.array([[0.0, 0.0, z]]), quat[None],
                    vel[None], spin[None])
    return x0, jnp.zeros((steps, 3))


def _sample_push(config: ScenarioConfig, rng, rest_z, rest_quat, steps):
    _, radius = config.cloud.bounding_sphere()
    theta = rng.uniform(0.0, 2.0 * np.pi)
    approach = jnp.array([np.cos(theta), np.sin(theta), 0.0])
    point = -(float(radius) + config.pusher_gap) * approach \
        + jnp.array([0.0, 0.0, rest_z])
    speed = rng.uniform(*config.pusher_speed)
    x0 = SceneState(jnp.array([[0.0, 0.0, rest_z]]), rest_quat[None],
                    jnp.zeros((1, 3)), jnp.zeros((1, 3)),
                    actuator_points=point[None],
                    actuator_vels=(speed * approach)[None])
    actions = jnp.broadcast_to(speed * approach, (steps, 3))
    return x0, actions


def generate_scenario(config: ScenarioConfig, out_dir=None) -> Dataset:
    """Roll out seeded train/test sequences with the true parameters.

    With ``out_dir`` the dataset is also written to disk (config, sphere
    file, and one trajectory CSV per sequence under train/ and test/).
    """
    rng = np.random.RandomState(config.seed)
    rest_z, rest_quat = rest_height(config)
    num_points = 1 if config.kind == "push_slide_settle" else 0
    roll = build_fast_rollout(config.model(), num_points)
    phys_raw = _phys_raw(config.phys)
    log_scales = jnp.log(config.cloud.scales)

    sequences = []
    for i in range(config.num_train + config.num_test):
        steps = (config.steps if i < config.num_train
                 else (config.test_steps or config.steps))
        if config.kind == "fall_and_rebound":
            x0, actions = _sample_fall(config, rng, rest_z, steps)
        else:
            x0, actions = _sample_push(config, rng, rest_z, rest_quat, steps)
        pts = (x0.actuator_points if x0.actuator_points is not None
               else jnp.zeros((0, 3)))
        out = roll(x0.positions[0], x0.orientations[0], x0.lin_vels[0],
                   x0.ang_vels[0], pts, actions, phys_raw,
                   config.cloud.centers, log_scales, config.h)
        sequences.append(ObservedSequence(
            x0=x0, actions=actions, positions=out[0], orientations=out[1]))

    dataset = Dataset(train=tuple(sequences[:config.num_train]),
                      test=tuple(sequences[config.num_train:]), h=config.h)
    if out_dir is not None:
        write_dataset(out_dir, config, dataset)
    return dataset


# ---------------------------------------------------------------------------
# Trajectory files
# ---------------------------------------------------------------------------

def geometry_hash(cloud: SphereCloud) -> str:
    text = "\n".join(
        FLOAT_FMT % v for v in
        np.concatenate([np.asarray(cloud.centers).ravel(),
                        np.asarray(cloud.scales).ravel()]))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class TrajectoryFile:
    """Parsed trajectory: header metadata plus stacked per-frame arrays."""

    version: int
    num_bodies: int
    h: float
    horizon: int
    geometry: str
    positions: jnp.ndarray          # (T+1, B, 3)
    orientations: jnp.ndarray       # (T+1, B, 4)
    lin_vels: jnp.ndarray           # (T+1, B, 3)
    ang_vels: jnp.ndarray           # (T+1, B, 3)
    actuator_points: jnp.ndarray | None = None    # (T+1, P, 3)
    actuator_vels: jnp.ndarray | None = None      # (T+1, P, 3)
    camera: str | None = None

    def x0(self) -> SceneState:
        pts = vels = None
        if self.actuator_points is not None:
            pts = self.actuator_points[0]
            vels = self.actuator_vels[0]
        return SceneState(self.positions[0], self.orientations[0],
                          self.lin_vels[0], self.ang_vels[0],
                          actuator_points=pts, actuator_vels=vels)


def save_trajectory(path, positions, orientations, lin_vels, ang_vels, h,
                    geometry="", actuator_points=None, actuator_vels=None,
                    camera=None) -> None:
    """Write stacked (T+1, B, ...) arrays as a trajectory CSV."""
    pos = np.atleast_3d(np.asarray(positions))
    quat = np.atleast_3d(np.asarray(orientations))
    lin = np.atleast_3d(np.asarray(lin_vels))
    ang = np.atleast_3d(np.asarray(ang_vels))
    frames, bodies = pos.shape[0], pos.shape[1]
    with open(path, "w") as f:
        f.write("# version %d\n" % TRAJECTORY_VERSION)
        f.write("# B %d\n" % bodies)
        f.write(("# h " + FLOAT_FMT + "\n") % h)
        f.write("# T %d\n" % (frames - 1))
        f.write("# geometry %s\n" % (geometry or "unspecified"))
        if camera:
            f.write("# camera %s\n" % camera)
        f.write("# columns %s\n" % ",".join(CSV_COLUMNS))
        for t in range(frames):
            for b in range(bodies):
                row = [t * h, float(b)] + list(pos[t, b]) + list(quat[t, b]) \
                    + list(lin[t, b]) + list(ang[t, b])
                f.write(",".join(FLOAT_FMT % v for v in row) + "\n")
            if actuator_points is not None:
                apts = np.asarray(actuator_points)
                avel = np.asarray(actuator_vels)
                for k in range(apts.shape[1]):
                    row = [t * h, float(ACTUATOR_ID)] + list(apts[t, k]) \
                        + [1.0, 0.0, 0.0, 0.0] + list(avel[t, k]) \
                        + [0.0, 0.0, 0.0]
                    f.write(",".join(FLOAT_FMT % v for v in row) + "\n")


def load_trajectory(path) -> TrajectoryFile:
    meta = {}
    body_rows, act_rows = {}, {}
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                parts = line[1:].split(None, 1)
                if len(parts) == 2:
                    meta[parts[0]] = parts[1]
                continue
            vals = [float(v) for v in line.split(",")]
            body = int(vals[1])
            (act_rows if body == ACTUATOR_ID else body_rows).setdefault(
                body, []).append(vals)
    bodies = sorted(body_rows)
    frames = len(body_rows[bodies[0]])
    for b in bodies:
        if len(body_rows[b]) != frames:
            raise ValueError("unequal frame counts per body")
    if "T" in meta and int(meta["T"]) + 1 != frames:
        raise ValueError("row count disagrees with declared horizon")

    def stack(rows_by_id, sl):
        return jnp.asarray(np.stack(
            [np.asarray(rows_by_id[i])[:, sl] for i in sorted(rows_by_id)],
            axis=1))

    pts = vels = None
    if act_rows:
        # Single pusher id; multiple points would need distinct ids.
        pts = stack(act_rows, slice(2, 5))
        vels = stack(act_rows, slice(9, 12))
    return TrajectoryFile(
        version=int(meta.get("version", TRAJECTORY_VERSION)),
        num_bodies=len(bodies),
        h=float(meta["h"]),
        horizon=frames - 1,
        geometry=meta.get("geometry", "unspecified"),
        positions=stack(body_rows, slice(2, 5)),
        orientations=stack(body_rows, slice(5, 9)),
        lin_vels=stack(body_rows, slice(9, 12)),
        ang_vels=stack(body_rows, slice(12, 15)),
        actuator_points=pts, actuator_vels=vels,
        camera=meta.get("camera"))


def sequence_to_file(seq: ObservedSequence, h, geometry="") -> dict:
    """kwargs for :func:`save_trajectory` from an observed sequence."""
    frames = seq.positions.shape[0]
    kwargs = dict(positions=seq.positions[:, None],
                  orientations=seq.orientations[:, None],
                  lin_vels=np.zeros((frames, 1, 3)),
                  ang_vels=np.zeros((frames, 1, 3)),
                  h=h, geometry=geometry)
    kwargs["lin_vels"][0, 0] = np.asarray(seq.x0.lin_vels[0])
    kwargs["ang_vels"][0, 0] = np.asarray(seq.x0.ang_vels[0])
    if seq.x0.actuator_points is not None:
        pts = np.asarray(seq.x0.actuator_points)
        acts = np.asarray(seq.actions)
        points = np.empty((frames, pts.shape[0], 3))
        vels = np.empty((frames, pts.shape[0], 3))
        points[0] = pts
        for t in range(1, frames):
            points[t] = points[t - 1] + h * acts[t - 1]
        vels[:-1] = acts[:, None, :]
        vels[-1] = acts[-1][None]
        kwargs.update(actuator_points=points, actuator_vels=vels)
    return kwargs


def file_to_sequence(tf: TrajectoryFile) -> ObservedSequence:
    if tf.actuator_vels is not None:
        actions = tf.actuator_vels[:-1, 0]
    else:
        actions = jnp.zeros((tf.horizon, 3))
    return ObservedSequence(x0=tf.x0(), actions=actions,
                            positions=tf.positions[:, 0],
                            orientations=tf.orientations[:, 0])


# ---------------------------------------------------------------------------
# Config files (YAML, sorted keys)
# ---------------------------------------------------------------------------

def config_to_dict(config: ScenarioConfig) -> dict:
    phys = config.phys
    return {
        "kind": config.kind,
        "h": config.h,
        "steps": config.steps,
        "num_train": config.num_train,
        "num_test": config.num_test,
        "test_steps": config.test_steps,
        "seed": config.seed,
        "physics": {
            "mass": float(phys.masses[0]),
            "inertia": [float(v) for v in phys.inertias[0]],
            "mu": float(phys.mu),
            "stiffness": float(phys.stiffness),
            "damping": float(phys.damping),
        },
        "sdf": {"beta": config.sdf.beta, "gamma": config.sdf.gamma,
                "delta": config.sdf.delta, "margin": config.sdf.margin},
        "ranges": {
            "drop_height": list(config.drop_height),
            "speed": list(config.speed),
            "spin": list(config.spin),
            "tilt": list(config.tilt),
            "pusher_speed": list(config.pusher_speed),
        },
        "pusher_gap": config.pusher_gap,
    }


def config_from_dict(data: dict, cloud: SphereCloud) -> ScenarioConfig:
    phys = data["physics"]
    sdf = data.get("sdf", {})
    ranges = data.get("ranges", {})
    kwargs = {k: tuple(v) for k, v in ranges.items()}
    return ScenarioConfig(
        kind=data["kind"], cloud=cloud,
        phys=PhysParams.from_values(phys["mass"], phys["inertia"], phys["mu"],
                                    phys["stiffness"], phys["damping"]),
        h=float(data.get("h", 0.005)), steps=int(data.get("steps", 15)),
        num_train=int(data.get("num_train", 1)),
        num_test=int(data.get("num_test", 4)),
        test_steps=(None if data.get("test_steps") is None
                    else int(data["test_steps"])),
        seed=int(data["seed"]),
        sdf=SoftSdfParams(beta=float(sdf.get("beta", 2000.0)),
                          gamma=float(sdf.get("gamma", 2000.0)),
                          delta=float(sdf.get("delta", 0.05)),
                          margin=float(sdf.get("margin", 0.01))),
        pusher_gap=float(data.get("pusher_gap", 0.002)),
        **kwargs)


def save_config(path, config: ScenarioConfig) -> None:
    with open(path, "w") as f:
        yaml.safe_dump(config_to_dict(config), f, sort_keys=True)


def load_config(path, cloud: SphereCloud) -> ScenarioConfig:
    with open(path) as f:
        return config_from_dict(yaml.safe_load(f), cloud)


def write_dataset(out_dir, config: ScenarioConfig, dataset: Dataset) -> None:
    os.makedirs(out_dir, exist_ok=True)
    save_config(os.path.join(out_dir, "scenario.yaml"), config)
    save_sphere_cloud(os.path.join(out_dir, "spheres.csv"), config.cloud)
    ghash = geometry_hash(config.cloud)
    for split, seqs in (("train", dataset.train), ("test", dataset.test)):
        os.makedirs(os.path.join(out_dir, split), exist_ok=True)
        for i, seq in enumerate(seqs):
            save_trajectory(
                os.path.join(out_dir, split, "seq_%03d.csv" % i),
                **sequence_to_file(seq, dataset.h, geometry=ghash))


def load_dataset(data_dir):
    """Read a dataset directory; returns (Dataset, SphereCloud, config)."""
    cloud = load_sphere_cloud(os.path.join(data_dir, "spheres.csv"))
    config = load_config(os.path.join(data_dir, "scenario.yaml"), cloud)
    splits = {}
    for split in ("train", "test"):
        seqs = []
        sub = os.path.join(data_dir, split)
        if os.path.isdir(sub):
            for name in sorted(os.listdir(sub)):
                if name.endswith(".csv"):
                    seqs.append(file_to_sequence(
                        load_trajectory(os.path.join(sub, name))))
        splits[split] = tuple(seqs)
    return (Dataset(train=splits["train"], test=splits["test"], h=config.h),
            cloud, config)


# ---------------------------------------------------------------------------
# Run manifests and plot-data export
# ---------------------------------------------------------------------------

def package_versions() -> dict:
    import jax

    from . import __version__

    return {"python": platform.python_version(),
            "numpy": np.__version__,
            "jax": jax.__version__,
            "diffcontact": __version__}


def write_manifest(out_dir, subcommand: str, inputs: dict, seed,
                   wall_time_s: float) -> str:
    """JSON manifest for one CLI run; the run is reproducible from it alone."""
    path = os.path.join(out_dir, "manifest.json")
    payload = {"subcommand": subcommand, "inputs": inputs, "seed": seed,
               "versions": package_versions(),
               "wall_time_s": round(float(wall_time_s), 6)}
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def read_manifest(path) -> dict:
    with open(path) as f:
        return json.load(f)


def save_curve(path, values, header="iteration,value") -> None:
    """Plot-data export: one CSV curve (loss history, error over time)."""
    with open(path, "w") as f:
        f.write("# " + header + "\n")
        for i, v in enumerate(np.asarray(values).ravel()):
            f.write(("%d," + FLOAT_FMT + "\n") % (i, v))
