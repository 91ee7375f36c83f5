"""Joint UAV trajectory and bandwidth planning for vehicular networks."""

__version__ = "0.1.0"
