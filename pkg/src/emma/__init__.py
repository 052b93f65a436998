"""Instruction-conditioned token adaptation for dual-encoder vision-language models, at desk scale."""

__version__ = "0.1.0"
