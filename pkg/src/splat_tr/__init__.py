"""Gaussian splatting with a diagonal Gauss-Newton optimizer and Hellinger trust regions."""

__version__ = "0.1.0"
