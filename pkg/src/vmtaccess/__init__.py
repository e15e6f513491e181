"""Employment sub-centers, job accessibility and censored VMT regression on hexagonal grids."""

__version__ = "0.1.0"
