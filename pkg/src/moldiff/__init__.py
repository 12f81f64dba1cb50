"""Equivariant denoising diffusion for 3D molecules.

Submodules:
  autodiff   reverse-mode autodiff engine on numpy
  kernels    numba/numpy dual-backend numeric kernels
  geometry   differentiable distances, angles, radial basis features
  dtn        dual-track attention denoiser
  diffusion  noise schedules, forward process, training loss, sampler
  gfloss     geometry-driven valency loss
  chem       bond perception, stability and validity metrics
  dataio     XYZ/SDF parsing, toy corpus, splits
  train      training loop
  cli        command line entry points
"""

__version__ = "0.1.0"
