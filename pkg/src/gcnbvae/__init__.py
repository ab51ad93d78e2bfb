"""Graph-convolutional beta-VAE for fixed-topology triangle meshes."""

__version__ = "0.1.0"
