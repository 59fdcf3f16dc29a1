# Models package for the ArtMap satellite collage pipeline

__version__ = "0.3.0"
