"""Multitask speech emotion recognition on a unified category + intensity label space."""

__version__ = "0.1.0"
