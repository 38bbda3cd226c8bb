"""Differentiable sphere-cloud rigid-body contact simulation toolkit.

The package provides, bottom up:

* ``spatial``   -- quaternion / SE(3) algebra and tangent-basis fans
* ``geometry``  -- sphere-cloud soft signed distance and contact generation
* ``dynamics``  -- closed-form impedance contact step and rollouts
* ``diff``      -- reverse-mode gradients through rollouts + FD checking
* ``render``    -- differentiable sphere-splat silhouette renderer
* ``sysid``     -- losses, identification loops, CEM baseline, metrics
* ``control``   -- gradient-shooting MPC
* ``harness``   -- scenario generation, file formats, run manifests
* ``cli``       -- command-line entry points

All numerics run in double precision on CPU.
"""

from jax import config as _jax_config

_jax_config.update("jax_enable_x64", True)

from . import spatial  # noqa: E402
from . import geometry  # noqa: E402
from . import dynamics  # noqa: E402
from . import diff  # noqa: E402
from . import render  # noqa: E402
from . import sysid  # noqa: E402
from . import control  # noqa: E402
from . import harness  # noqa: E402

__all__ = [
    "spatial",
    "geometry",
    "dynamics",
    "diff",
    "render",
    "sysid",
    "control",
    "harness",
]

__version__ = "0.1.0"
