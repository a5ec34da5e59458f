"""
textcrystal
Text-conditioned joint diffusion over lattices, coordinates and atom types
"""

__version__ = "0.1.0"
