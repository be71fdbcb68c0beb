"""Offline backbone feature exporter.

Runs a frozen convolutional backbone over an image directory and writes one
NPY feature map per image plus a JSON manifest, in the formats the part
discovery pipeline consumes."""

from .export import ExportSpec, LAYER_TAPS, export

__version__ = "0.1.0"
