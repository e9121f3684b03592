"""Optical sonar-scene rendering refined by a render-conditioned WGAN-GP."""

__version__ = "0.1.0"
