"""Bridge service: serve audio chat models behind a newline-JSON protocol."""

__version__ = "0.1.0"
