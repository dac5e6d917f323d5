"""Synthetic scenes, metrics, image I/O, training and the command line."""
