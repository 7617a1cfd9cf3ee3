"""Fixed-size recurrent 3D voxel memory for small Transformers."""
__version__ = "0.1.0"
