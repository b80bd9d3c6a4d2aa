"""Deterministic simulator and library for an OOD-guarded autonomous braking pipeline.

Camera frames feed a classical lane follower and a latent-space OOD detector;
the detector's emergency-stop signal latches the motor controller. Everything
runs under either a wall clock or a deterministic virtual clock, and run logs
feed stopping-distance, timing, and threshold-sweep analyses.
"""

__version__ = "0.1.0"
