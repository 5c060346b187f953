"""Robust feature inference and supporting numerics."""
