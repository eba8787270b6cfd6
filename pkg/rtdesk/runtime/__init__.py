"""Closed-loop inference runtime."""
