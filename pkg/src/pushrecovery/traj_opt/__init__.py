"""Trajectory optimization for OWS transition feasibility."""
