"""Deep feature consistency registration: correspondence embedding, spectral
subset matching and weighted Procrustes, with classic baselines."""

__version__ = "0.1.0"
