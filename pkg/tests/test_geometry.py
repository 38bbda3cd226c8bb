import jax
import jax.numpy as jnp
import numpy as np
import pytest

from diffcontact.geometry import (ACTUATOR_ID, PLANE_ID, DegenerateGradientError,
                                  PlaneGeom, SoftSdfParams, SphereCloud,
                                  blended_distance, farthest_point_sample,
                                  fit_sphere_cloud, generate_contacts,
                                  load_sphere_cloud, load_xyz,
                                  save_sphere_cloud, signed_distance,
                                  soft_min_distance, surface_projection)
from diffcontact.spatial import Pose

from conftest import random_cloud

PARAMS = SoftSdfParams()


def brute_min_distance(cloud, pose, p):
    centers_w = np.asarray(pose.apply_many(cloud.centers))
    d = np.linalg.norm(np.asarray(p) - centers_w, axis=1) - np.asarray(cloud.radii)
    return float(np.min(d))


def test_radii_are_twice_scales(cloud):
    np.testing.assert_allclose(cloud.radii, 2.0 * cloud.scales)


def test_cloud_validation():
    with pytest.raises(ValueError):
        SphereCloud(jnp.zeros((2, 3)), jnp.zeros(3))
    with pytest.raises(ValueError):
        SphereCloud(jnp.zeros((0, 3)), jnp.zeros(0))


def test_soft_min_bracketing_brute_force():
    # min - ln(N)/beta <= phi_soft <= min, against a brute-force oracle.
    rng = np.random.RandomState(10)
    for _ in range(20):
        cloud = random_cloud(rng)
        pose = Pose(jnp.asarray(rng.uniform(-0.2, 0.2, 3)),
                    jnp.array([1.0, 0, 0, 0]))
        bias = np.log(cloud.num_spheres) / PARAMS.beta
        for _ in range(100):
            p = rng.uniform(-0.4, 0.4, 3)
            exact = brute_min_distance(cloud, pose, p)
            soft = float(soft_min_distance(cloud, pose, jnp.asarray(p), PARAMS))
            assert exact - bias - 1e-12 <= soft <= exact + 1e-12


def test_blended_floor_bound():
    rng = np.random.RandomState(11)
    for _ in range(20):
        cloud = random_cloud(rng)
        for _ in range(100):
            p = rng.uniform(-0.3, 0.3, 3)
            phi = float(signed_distance(cloud, Pose.identity(),
                                        jnp.asarray(p), PARAMS))
            assert phi >= -PARAMS.delta - 1e-9


def test_blend_is_near_identity_outside():
    # Far outside the body the sigmoid blend must not distort the distance.
    assert float(blended_distance(jnp.asarray(0.5), PARAMS)) == \
        pytest.approx(0.5, abs=1e-12)
    assert float(blended_distance(jnp.asarray(-0.5), PARAMS)) == \
        pytest.approx(-PARAMS.delta, abs=1e-12)


def test_single_sphere_exact_distance():
    # One sphere: the LSE is exact, so phi equals ||p - c|| - r outside.
    cloud = SphereCloud(jnp.array([[0.1, -0.2, 0.3]]), jnp.array([0.025]))
    p = jnp.array([0.1, -0.2, 0.5])
    got = float(soft_min_distance(cloud, Pose.identity(), p, PARAMS))
    assert got == pytest.approx(0.2 - 0.05, abs=1e-12)


def test_surface_projection_reevaluates_to_zero():
    # Outside the body the field is near-linear, so one Newton step lands
    # on the surface; the raw soft distance must re-evaluate to ~0 there.
    sharp = SoftSdfParams(beta=2000.0, gamma=2000.0, delta=0.05, margin=0.01)
    rng = np.random.RandomState(12)
    checked = 0
    while checked < 20:
        cloud = random_cloud(rng)
        p = rng.uniform(-0.3, 0.3, 3)
        phi = float(signed_distance(cloud, Pose.identity(), jnp.asarray(p), sharp))
        if not 0.005 < phi < 0.1:
            continue
        p_c, n = surface_projection(cloud, Pose.identity(), jnp.asarray(p), sharp)
        assert float(jnp.linalg.norm(n)) == pytest.approx(1.0, abs=1e-9)
        # The witness point lies on the raw surface (soft min distance zero);
        # the blended field reads -delta/2 there by construction.
        back = float(soft_min_distance(cloud, Pose.identity(), p_c, sharp))
        assert abs(back) < 1e-3
        checked += 1


def test_surface_projection_degenerate_raises():
    cloud = SphereCloud(jnp.array([[0.0, 0.0, 0.0]]), jnp.array([0.05]))
    with pytest.raises(DegenerateGradientError):
        surface_projection(cloud, Pose.identity(), jnp.zeros(3), PARAMS)


def test_plane_contacts_closed_form(cloud):
    # Sphere bottoms inside the margin produce plane contacts at the analytic
    # witness points with phi = center_z - r.
    pose = Pose(jnp.array([0.0, 0.0, 0.0805]), jnp.array([1.0, 0, 0, 0]))
    sharp = SoftSdfParams(beta=2000.0, gamma=2000.0, delta=0.05, margin=0.01)
    cs = generate_contacts([cloud], [pose], sharp, plane=PlaneGeom())
    assert len(cs) == 5
    for c in cs:
        assert c.body_a == 0 and c.body_b == PLANE_ID
        np.testing.assert_allclose(c.normal, [0, 0, 1], atol=1e-12)
        i = int(np.argmin(np.linalg.norm(
            np.asarray(pose.apply_many(cloud.centers))[:, :2]
            - np.asarray(c.point)[:2], axis=1)))
        center_w = np.asarray(pose.apply_many(cloud.centers))[i]
        assert float(c.phi) == pytest.approx(center_w[2] - 0.08, abs=1e-12)
        np.testing.assert_allclose(c.point, center_w - [0, 0, 0.08], atol=1e-12)


def test_contact_cap_keeps_deepest():
    # Nine spheres at staggered heights with a cap of 8: the shallowest one
    # must be the candidate dropped.
    n = 9
    centers = np.zeros((n, 3))
    centers[:, 0] = np.arange(n) * 0.2
    centers[:, 2] = 0.04 + np.arange(n) * 1e-4
    cloud = SphereCloud(jnp.asarray(centers), jnp.full(n, 0.025))
    cs = generate_contacts([cloud], [Pose.identity()], PARAMS, plane=PlaneGeom())
    assert len(cs) == 8
    xs = sorted(float(c.point[0]) for c in cs)
    assert xs == pytest.approx([i * 0.2 for i in range(8)])


def test_body_body_contact_against_sphere_pair_oracle():
    # Two single-sphere bodies overlapping: at high beta the soft SDF reduces
    # to the exact sphere pair, for which gap and normal are analytic.
    sharp = SoftSdfParams(beta=5000.0, gamma=5000.0, delta=0.05, margin=0.01)
    a = SphereCloud(jnp.array([[0.0, 0.0, 0.0]]), jnp.array([0.02]))   # r=0.04
    b = SphereCloud(jnp.array([[0.0, 0.0, 0.0]]), jnp.array([0.03]))   # r=0.06
    pa = Pose(jnp.array([0.0, 0.0, 0.0]), jnp.array([1.0, 0, 0, 0]))
    pb = Pose(jnp.array([0.095, 0.0, 0.0]), jnp.array([1.0, 0, 0, 0]))
    cs = generate_contacts([a, b], [pa, pb], sharp)
    assert len(cs) == 2          # both query directions fire
    expected_gap = 0.095 - 0.04 - 0.06
    for c in cs:
        assert float(c.phi) == pytest.approx(expected_gap, abs=1e-4)
        # Normal points from B into A along the center line.
        direction = np.asarray(c.normal)
        if c.body_a == 0:
            np.testing.assert_allclose(direction, [-1, 0, 0], atol=1e-6)
        else:
            np.testing.assert_allclose(direction, [1, 0, 0], atol=1e-6)


def test_actuator_contact_carries_commanded_velocity(cloud):
    sharp = SoftSdfParams(beta=2000.0, gamma=2000.0, delta=0.05, margin=0.01)
    pose = Pose(jnp.array([0.0, 0.0, 0.2]), jnp.array([1.0, 0, 0, 0]))
    pt = jnp.array([[-0.131, 0.0, 0.2]])
    vel = jnp.array([[0.15, 0.0, 0.0]])
    cs = generate_contacts([cloud], [pose], sharp, actuator_points=pt,
                           actuator_vels=vel)
    assert len(cs) == 1
    c = cs.contacts[0]
    assert c.body_a == ACTUATOR_ID and c.body_b == 0
    np.testing.assert_allclose(c.rhs_vel, [0.15, 0, 0], atol=1e-12)
    # Outward normal of the body at the -x face points along -x.
    np.testing.assert_allclose(c.normal, [-1, 0, 0], atol=1e-3)


def test_far_actuator_point_ignored(cloud):
    cs = generate_contacts([cloud], [Pose.identity()], PARAMS,
                           actuator_points=jnp.array([[1.0, 1.0, 1.0]]))
    assert len(cs) == 0


def test_farthest_point_sample_spreads():
    rng = np.random.RandomState(13)
    pts = rng.uniform(-1, 1, size=(200, 3))
    idx = farthest_point_sample(pts, 10, seed=0)
    assert len(set(idx.tolist())) == 10
    idx2 = farthest_point_sample(pts, 10, seed=0)
    np.testing.assert_array_equal(idx, idx2)
    with pytest.raises(ValueError):
        farthest_point_sample(pts[:5], 10)


def test_fit_sphere_cloud_single_sphere_oracle():
    # Points sampled on a sphere of known center/radius: one fitted sphere
    # must recover them (algebraic oracle: phi = 0 on the surface means
    # ||p - c|| = r = 2 s for all samples).
    rng = np.random.RandomState(14)
    center = np.array([0.05, -0.02, 0.1])
    radius = 0.06
    dirs = rng.standard_normal((200, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    pts = center + radius * dirs
    fit = fit_sphere_cloud(pts, 1, iters=500)
    np.testing.assert_allclose(np.asarray(fit.centers[0]), center, atol=5e-3)
    assert float(fit.radii[0]) == pytest.approx(radius, abs=5e-3)


def test_fit_sphere_cloud_rejects_degenerate():
    with pytest.raises(ValueError):
        fit_sphere_cloud(np.zeros((50, 3)), 2)


def test_sphere_cloud_roundtrip(tmp_path, cloud):
    path = tmp_path / "spheres.csv"
    save_sphere_cloud(path, cloud)
    back = load_sphere_cloud(path)
    np.testing.assert_array_equal(np.asarray(back.centers),
                                  np.asarray(cloud.centers))
    np.testing.assert_array_equal(np.asarray(back.scales),
                                  np.asarray(cloud.scales))


def test_load_xyz(tmp_path):
    path = tmp_path / "pts.xyz"
    path.write_text("# comment\n0 0 0\n1 2 3\n\n4 5 6\n")
    pts = load_xyz(path)
    np.testing.assert_array_equal(pts, [[0, 0, 0], [1, 2, 3], [4, 5, 6]])


def test_sdf_gradient_matches_fd():
    from diffcontact.diff import grad_check

    rng = np.random.RandomState(15)
    cloud = random_cloud(rng)
    err = grad_check(
        lambda p: signed_distance(cloud, Pose.identity(), p, PARAMS),
        jnp.asarray(rng.uniform(-0.3, 0.3, 3)), abs_step=1e-6)
    assert err < 1e-4
