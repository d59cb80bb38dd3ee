"""Context-conditioned variational autoencoder for anomaly detection on detector grids."""

__version__ = "0.1.0"
