"""munas: multi-objective architecture search for microcontroller-sized CNNs."""

__version__ = "0.1.0"
