"""Audio-driven talking heads built from mesh-rigged 3D Gaussians."""

__version__ = "0.1.0"
