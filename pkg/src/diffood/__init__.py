"""Embedding-space diffusion language models as out-of-distribution detectors, at toy scale."""

__version__ = "0.1.0"
