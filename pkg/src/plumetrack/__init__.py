"""Twin-experiment contaminant tracking: dispersion model, ensemble filter, drone routing."""

__version__ = "0.1.0"
