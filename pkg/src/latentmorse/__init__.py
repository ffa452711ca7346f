"""Region-of-attraction estimation from trajectory data via a learned latent
map and Morse graphs over a cubical grid."""

__version__ = "0.1.0"
