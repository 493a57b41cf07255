"""Real-time dense stereo matching with Bayesian patch fusion on the CPU."""
__version__ = "0.1.0"
