"""Numerical laboratory for subelliptic super-Poincaré, Hardy and U-bound inequalities."""

__version__ = "0.1.0"
SCHEMA_VERSION = "1"
