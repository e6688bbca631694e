"""Scene change detection toolkit: synthesis, training, and object-level evaluation."""

__version__ = "0.1.0"
