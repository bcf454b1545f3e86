"""Relative-navigation smoothing toolkit for small-body proximity operations.

Modules
-------
liegroup    SO(3)/SE(3) primitives and the 12-dof manifold state error
dynamics    coupled spacecraft/asteroid relative equations of motion
integrator  Crouch-Grossman geometric integration
stochastic  process-noise discretization, smoothability test, sampling
factors     residuals/noise models for all factor species
solver      factor graph + sparse Levenberg-Marquardt smoothing
simfront    synthetic world, observations, and the incremental front-end
metrics     LVLH trajectory errors and landmark map quality
pipeline    file-based simulate/solve/evaluate/report stages
cli         command-line interface
"""

__version__ = "0.1.0"

from .liegroup import Pose, State  # noqa: F401
