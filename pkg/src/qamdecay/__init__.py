"""Decay of quantum accelerator modes: classical maps, Floquet operators, resonances and tunneling theory."""

__version__ = "0.1.0"
