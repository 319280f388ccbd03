"""Multi-agent trajectory prediction from anchor prototypes aligned by a scene-level MRF."""

__version__ = "0.1.0"
