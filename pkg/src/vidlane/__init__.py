"""Video lane detection with recurrent temporal context aggregation (numpy, float64)."""

__version__ = "0.1.0"
