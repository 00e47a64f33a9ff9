"""Factorized linear layers (tensor train, tree, MERA) and the surrounding
training, verification, and reporting machinery."""

__version__ = "0.1.0"
