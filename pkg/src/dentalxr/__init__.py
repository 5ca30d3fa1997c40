"""Radiograph classification toolkit: preprocessing, CNNs, hybrid classifiers and CV evaluation."""

__version__ = "0.1.0"
