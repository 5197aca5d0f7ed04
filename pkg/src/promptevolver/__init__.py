"""Black-box prompt inversion for text-to-image models by VLM-guided evolution."""

__version__ = "0.1.0"
