"""Generation-reflection-correction pipeline for semantic-ID generative recommendation."""

__version__ = "0.1.0"
