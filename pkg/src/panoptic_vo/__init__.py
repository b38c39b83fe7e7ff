"""Panoptic-confidence dense bundle adjustment and geometry-driven panoptic propagation."""
