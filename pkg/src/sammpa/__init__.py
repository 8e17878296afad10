"""Few-shot segmentation by mask propagation and automatic prompting."""

__version__ = "0.1.0"
