"""Multimodal unlearnable-example protection on a toy vision-language surrogate."""

__version__ = "0.1.0"
