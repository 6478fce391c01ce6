"""Desk-scale laboratory for large-minibatch distributed synchronous SGD."""

__version__ = "0.1.0"
