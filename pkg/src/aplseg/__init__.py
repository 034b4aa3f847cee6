"""Few-shot segmentation of scanning-probe-style imagery with adaptive visual prompts."""

__version__ = "0.1.0"
