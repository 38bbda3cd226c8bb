import jax.numpy as jnp
import numpy as np
import pytest

from diffcontact.dynamics import PhysParams, SceneModel
from diffcontact.geometry import PlaneGeom, SoftSdfParams, SphereCloud

# Five-sphere "plus" block, 8 cm bounding radius per sphere, used everywhere.
CANONICAL_CENTERS = np.array([
    [0.0, 0.0, 0.0],
    [0.05, 0.0, 0.0],
    [-0.05, 0.0, 0.0],
    [0.0, 0.05, 0.0],
    [0.0, -0.05, 0.0],
])
CANONICAL_SCALES = np.full(5, 0.04)

# Sharp SDF shaping for dynamics scenes; the LSE bias ln(N)/beta and the
# sigmoid blend width must stay well below the contact scale.
SHARP_SDF = SoftSdfParams(beta=2000.0, gamma=2000.0, delta=0.05, margin=0.01)

H = 0.005


@pytest.fixture(scope="session")
def cloud():
    return SphereCloud(jnp.asarray(CANONICAL_CENTERS),
                       jnp.asarray(CANONICAL_SCALES))


@pytest.fixture(scope="session")
def model(cloud):
    return SceneModel(clouds=(cloud,), plane=PlaneGeom(), sdf=SHARP_SDF)


@pytest.fixture(scope="session")
def phys():
    """Ground-truth parameters for the identification criteria."""
    return PhysParams.from_values(0.5, [1e-3, 1e-3, 1e-3], 0.4, 2000.0, 20.0)


@pytest.fixture(scope="session")
def soft_phys():
    """Softer contact that survives a 0.3 m drop at h=0.005."""
    return PhysParams.from_values(0.5, [1e-3, 1e-3, 1e-3], 0.4, 1000.0, 2.0)


def phys_raw(p: PhysParams):
    return jnp.concatenate([p.mass_raw, p.inertia_raw.ravel(),
                            jnp.atleast_1d(p.mu_raw),
                            jnp.atleast_1d(p.k_raw),
                            jnp.atleast_1d(p.d_raw)])


def random_cloud(rng, n=None):
    n = n or rng.randint(2, 9)
    centers = rng.uniform(-0.1, 0.1, size=(n, 3))
    scales = rng.uniform(0.01, 0.05, size=n)
    return SphereCloud(jnp.asarray(centers), jnp.asarray(scales))
