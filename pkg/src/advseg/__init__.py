"""advseg: generative deformation + intensity attacks on 2D segmenters."""

__version__ = "0.1.0"
