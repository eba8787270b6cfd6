"""Numerics, configuration, action codec, data and training."""
