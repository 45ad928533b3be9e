"""Deterministic 2-D runner testbed for bridging pre-trained locomotion policies."""

__version__ = "0.1.0"
