"""Trajectory-mixed supervision lab: tabular policies, trainers and drift diagnostics."""

__version__ = "0.1.0"
