"""Edge/cloud NILM pipeline: data, models, broker, services and benchmarks."""

__version__ = "0.1.0"
