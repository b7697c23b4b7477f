"""octgen: part-conditioned multi-scale octree diffusion for 3D shapes."""

__version__ = "0.1.0"
