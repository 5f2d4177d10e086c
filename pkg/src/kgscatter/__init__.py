"""Klein-Gordon scattering on asymptotically flat 1+1 backgrounds."""

__version__ = "0.1.0"
