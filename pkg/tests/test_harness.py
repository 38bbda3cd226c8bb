import filecmp
import os

import jax.numpy as jnp
import numpy as np
import pytest

from diffcontact.harness import (ScenarioConfig, config_from_dict,
                                 config_to_dict, generate_scenario,
                                 geometry_hash, load_config, load_dataset,
                                 load_trajectory, read_manifest, rest_height,
                                 save_config, save_curve, save_trajectory,
                                 sequence_to_file, file_to_sequence,
                                 write_manifest)

from conftest import H


@pytest.fixture(scope="module")
def fall_config(cloud, soft_phys):
    return ScenarioConfig(kind="fall_and_rebound", cloud=cloud,
                          phys=soft_phys, steps=8, num_train=1, num_test=2,
                          seed=5)


@pytest.fixture(scope="module")
def push_config(cloud, soft_phys):
    return ScenarioConfig(kind="push_slide_settle", cloud=cloud,
                          phys=soft_phys, steps=8, num_train=1, num_test=1,
                          test_steps=12, seed=7)


def test_config_validation(cloud, soft_phys):
    with pytest.raises(ValueError):
        ScenarioConfig(kind="teleport", cloud=cloud, phys=soft_phys)
    with pytest.raises(ValueError):
        ScenarioConfig(kind="fall_and_rebound", cloud=cloud, phys=soft_phys,
                       steps=0)
    with pytest.raises(ValueError):
        ScenarioConfig(kind="fall_and_rebound", cloud=cloud, phys=soft_phys,
                       num_train=0)
    with pytest.raises(ValueError):
        ScenarioConfig(kind="fall_and_rebound", cloud=cloud, phys=soft_phys,
                       drop_height=(0.02, 0.01))


def test_rest_height_is_settled(fall_config):
    from diffcontact.dynamics import ActionInput, free_state, step

    z, quat = rest_height(fall_config)
    # Bottom spheres near touching and a further step barely moves the body.
    assert 0.07 < z < 0.09
    x = free_state([0.0, 0.0, z])
    x = x.__class__(x.positions, quat[None], x.lin_vels, x.ang_vels)
    nxt = step(x, ActionInput(), fall_config.phys, fall_config.model(), H)
    assert abs(float(nxt.positions[0, 2]) - z) < 1e-6


def test_generate_scenario_shapes(fall_config, push_config):
    data = generate_scenario(fall_config)
    assert len(data.train) == 1 and len(data.test) == 2
    for seq in data.train + data.test:
        assert seq.positions.shape == (9, 3)
        assert seq.orientations.shape == (9, 4)
        assert seq.actions.shape == (8, 3)
        assert seq.x0.actuator_points is None

    push = generate_scenario(push_config)
    assert push.train[0].positions.shape == (9, 3)
    assert push.test[0].positions.shape == (13, 3)    # test_steps override
    seq = push.train[0]
    assert seq.x0.actuator_points is not None
    # Pusher starts pusher_gap outside the bounding sphere, aimed at the body.
    _, radius = push_config.cloud.bounding_sphere()
    d = float(jnp.linalg.norm(seq.x0.actuator_points[0][:2]))
    assert d == pytest.approx(float(radius) + push_config.pusher_gap,
                              abs=1e-12)
    # Commanded velocity points from the pusher toward the body.
    v = np.asarray(seq.actions[0])
    p = np.asarray(seq.x0.actuator_points[0])
    assert np.dot(v[:2], -p[:2]) > 0


def test_generate_scenario_deterministic(fall_config):
    a = generate_scenario(fall_config)
    b = generate_scenario(fall_config)
    np.testing.assert_array_equal(np.asarray(a.train[0].positions),
                                  np.asarray(b.train[0].positions))
    np.testing.assert_array_equal(np.asarray(a.test[1].orientations),
                                  np.asarray(b.test[1].orientations))


def test_geometry_hash_sensitivity(cloud):
    from diffcontact.geometry import SphereCloud

    h1 = geometry_hash(cloud)
    assert len(h1) == 16
    bumped = SphereCloud(cloud.centers + 1e-12, cloud.scales)
    assert geometry_hash(bumped) != h1
    assert geometry_hash(cloud) == h1


def test_trajectory_roundtrip_bitwise(tmp_path, fall_config):
    # Save -> load -> save must be byte-identical: values survive the text
    # format exactly at 17 significant digits.
    data = generate_scenario(fall_config)
    seq = data.train[0]
    p1 = tmp_path / "a.csv"
    p2 = tmp_path / "b.csv"
    ghash = geometry_hash(fall_config.cloud)
    save_trajectory(p1, **sequence_to_file(seq, H, geometry=ghash))
    tf = load_trajectory(p1)
    assert tf.num_bodies == 1 and tf.horizon == 8
    assert tf.h == H and tf.geometry == ghash
    back = file_to_sequence(tf)
    save_trajectory(p2, **sequence_to_file(back, tf.h, geometry=tf.geometry))
    assert filecmp.cmp(p1, p2, shallow=False)
    np.testing.assert_array_equal(np.asarray(back.positions),
                                  np.asarray(seq.positions))


def test_trajectory_pusher_rows_roundtrip(tmp_path, push_config):
    data = generate_scenario(push_config)
    seq = data.train[0]
    path = tmp_path / "push.csv"
    save_trajectory(path, **sequence_to_file(seq, H))
    tf = load_trajectory(path)
    assert tf.actuator_points is not None
    np.testing.assert_allclose(np.asarray(tf.actuator_points[0]),
                               np.asarray(seq.x0.actuator_points), atol=1e-15)
    back = file_to_sequence(tf)
    np.testing.assert_allclose(np.asarray(back.actions),
                               np.asarray(seq.actions), atol=1e-15)
    np.testing.assert_allclose(np.asarray(back.x0.lin_vels),
                               np.asarray(seq.x0.lin_vels), atol=1e-15)


def test_trajectory_rejects_inconsistent_header(tmp_path, fall_config):
    data = generate_scenario(fall_config)
    path = tmp_path / "bad.csv"
    save_trajectory(path, **sequence_to_file(data.train[0], H))
    lines = path.read_text().splitlines()
    lines = [l for l in lines if not l.startswith("# T")] + []
    path.write_text("\n".join(["# T 3"] + lines) + "\n")
    with pytest.raises(ValueError):
        load_trajectory(path)


def test_config_roundtrip(tmp_path, push_config):
    path = tmp_path / "scenario.yaml"
    save_config(path, push_config)
    back = load_config(path, push_config.cloud)
    assert config_to_dict(back) == config_to_dict(push_config)
    # Serialized form is plain data (no object tags).
    assert "!!" not in path.read_text()


def test_config_dict_defaults(cloud, soft_phys):
    d = config_to_dict(ScenarioConfig(kind="fall_and_rebound", cloud=cloud,
                                      phys=soft_phys, seed=3))
    minimal = {"kind": d["kind"], "physics": d["physics"], "seed": 3}
    cfg = config_from_dict(minimal, cloud)
    assert cfg.h == 0.005 and cfg.steps == 15 and cfg.test_steps is None


def test_dataset_write_load_roundtrip(tmp_path, push_config):
    out = tmp_path / "data"
    generate_scenario(push_config, out_dir=out)
    assert (out / "scenario.yaml").exists()
    assert (out / "spheres.csv").exists()
    assert (out / "train" / "seq_000.csv").exists()
    assert (out / "test" / "seq_000.csv").exists()
    data, cloud, cfg = load_dataset(out)
    assert len(data.train) == 1 and len(data.test) == 1
    assert data.h == push_config.h
    fresh = generate_scenario(push_config)
    np.testing.assert_allclose(np.asarray(data.train[0].positions),
                               np.asarray(fresh.train[0].positions),
                               atol=1e-15)
    np.testing.assert_array_equal(np.asarray(cloud.centers),
                                  np.asarray(push_config.cloud.centers))


def test_manifest_roundtrip(tmp_path):
    path = write_manifest(tmp_path, "simulate", {"config": "c.yaml"}, seed=4,
                          wall_time_s=1.234567891)
    m = read_manifest(path)
    assert m["subcommand"] == "simulate"
    assert m["inputs"] == {"config": "c.yaml"}
    assert m["seed"] == 4
    assert m["wall_time_s"] == 1.234568
    assert set(m["versions"]) >= {"python", "numpy", "jax", "diffcontact"}


def test_save_curve(tmp_path):
    path = tmp_path / "loss.csv"
    save_curve(path, [1.0, 0.5, 0.25], header="iteration,loss")
    lines = path.read_text().splitlines()
    assert lines[0] == "# iteration,loss"
    assert lines[1] == "0,1" and lines[3] == "2,0.25"
