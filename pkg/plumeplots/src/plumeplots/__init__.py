"""Post-hoc figure rendering for assimilation run directories."""

__version__ = "0.1.0"
