"""Behavioral simulator of a hybrid analog/digital processing-in-memory DNN accelerator."""

__version__ = "0.1.0"
