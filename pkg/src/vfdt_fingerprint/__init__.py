"""Device fingerprinting from variance fractal dimension trajectories of IQ signals."""

__version__ = "0.1.0"
