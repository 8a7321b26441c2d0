"""Deterministic simulator of xPU plus Logic-PIM serving for MoE language models."""

__version__ = "0.1.0"
