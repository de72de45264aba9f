"""Trunk spring-loaded inverted pendulum running under virtual-point control."""
__version__ = "0.1.0"
