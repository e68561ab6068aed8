"""3D tensor-parallel full-graph GCN training on a virtual grid of in-process ranks."""

__version__ = "0.1.0"
