"""Progressive multi-agent reasoning for perturbation response prediction."""

__version__ = "0.1.0"
