"""Asymmetric token compression on a toy transformer."""
