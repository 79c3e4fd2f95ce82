"""Specialized sparse autoencoders: training, data selection and tail-concept evaluation."""

__version__ = "0.1.0"
