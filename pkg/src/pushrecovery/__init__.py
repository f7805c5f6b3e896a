"""Push-recovery planning for keyframe-based bipedal walking."""

__version__ = "0.1.0"
