"""Synthetic tabletop benchmark: scenes, tasks, scripted expert and evaluation suites."""
