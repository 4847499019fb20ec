"""Spike-triggered contextual biasing toolkit for CTC decoding."""

__version__ = "0.1.0"
