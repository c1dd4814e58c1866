"""Delay-aware robust tube MPC and CBF safety filtering lab."""

__version__ = "0.1.0"
