"""Energy-aware footstep planning and model-based control for a simulated quadruped."""

__version__ = "0.1.0"
