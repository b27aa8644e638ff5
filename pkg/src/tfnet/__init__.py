"""Low-latency neural speech codec operating on STFT frames."""

__version__ = "0.1.0"
