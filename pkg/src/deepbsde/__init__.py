"""Deep BSDE solver for high-dimensional semilinear parabolic PDEs."""

__version__ = "0.1.0"
