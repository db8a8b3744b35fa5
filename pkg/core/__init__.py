"""Renderers, training, density control, meshing and evaluation."""
