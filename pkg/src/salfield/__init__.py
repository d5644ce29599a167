"""Category-level shape saliency fields from deep implicit surface networks."""

__version__ = "0.1.0"
