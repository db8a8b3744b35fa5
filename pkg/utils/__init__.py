"""Geometry helpers and run logging."""
