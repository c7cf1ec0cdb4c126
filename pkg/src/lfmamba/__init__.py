"""Light-field super-resolution with selective state-space scans, on numpy."""

import os

# LFMAMBA_THREADS caps the BLAS pool; it must be set before numpy loads
if "LFMAMBA_THREADS" in os.environ:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, os.environ["LFMAMBA_THREADS"])

from .geometry import LightField, geometry_ensemble  # noqa: E402
from .net import LfMamba, NetworkConfig, analytic_param_count, count_flops, count_params, toy_config  # noqa: E402
from .tensor import Tensor, no_grad, precision  # noqa: E402

__version__ = "0.1.0"

__all__ = ["LfMamba", "NetworkConfig", "LightField", "Tensor", "analytic_param_count", "count_flops",
           "count_params", "geometry_ensemble", "no_grad", "precision", "toy_config"]
