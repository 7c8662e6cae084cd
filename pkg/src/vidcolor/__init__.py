"""Language-guided video colorization with temporally deformable attention."""

__version__ = "0.1.0"
