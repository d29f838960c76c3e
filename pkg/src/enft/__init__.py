"""Non-consecutive feature tracking and segment-based bundle adjustment."""

__version__ = "0.1.0"
