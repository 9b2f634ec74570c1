"""Object-and-caption conditioned image generation via an implicit relation graph."""

__version__ = "0.1.0"
