"""Tetrahedral 4D cardiac shape recovery from sparse slices."""
