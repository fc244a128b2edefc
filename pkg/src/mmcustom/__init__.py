"""Customized text-to-image generation driven by prompts that mix text and images."""

__version__ = "0.1.0"
