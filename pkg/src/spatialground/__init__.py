"""Open-vocabulary 3D grounding of spatial queries over synthetic scenes."""

__version__ = "0.1.0"
