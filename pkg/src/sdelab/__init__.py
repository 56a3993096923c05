"""sdelab: numerical laboratory for SDEs with random Hoelder drift."""

__version__ = "0.1.0"
