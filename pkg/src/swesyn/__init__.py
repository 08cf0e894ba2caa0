"""Issue-resolution agent trajectories, trajectory synthesis and evaluation metrics."""

__version__ = "0.1.0"
