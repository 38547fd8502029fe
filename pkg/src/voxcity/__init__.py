"""Sparse-voxel city synthesis toolkit.

Subpackages and modules map to the pipeline stages: hashed sparse grids
(`grid`), trilinear splat/sample (`attrib`), multi-level coarsening
(`rehash`), the autodiff network stack (`nn`), latent diffusion samplers
(`diffusion`), dataset construction (`dataset`), geometric metrics
(`metrics`) and end-to-end orchestration (`pipeline`, `cli`).
"""

__version__ = "0.1.0"
