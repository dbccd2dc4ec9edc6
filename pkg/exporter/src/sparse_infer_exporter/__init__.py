"""Checkpoint exporter for the sparse-infer engine's file formats."""

from .export import ExportError, ExportManifest, LayerEntry, UnsupportedLayerError, export
from .formats import dense3_bytes, fnv1a64

__version__ = "0.1.0"
