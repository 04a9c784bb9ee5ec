"""Neural energy-minimization solver for p-Laplacian obstacle problems."""
__version__ = "0.1.0"
