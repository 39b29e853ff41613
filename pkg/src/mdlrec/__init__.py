"""Multi-distribution learning for multi-scenario, multi-task ranking."""

__version__ = "0.1.0"
