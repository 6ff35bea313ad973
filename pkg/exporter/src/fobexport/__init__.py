"""Frozen vision-language model to FOBO embedding exporter."""

from .export import (ExportError, ExportManifest, export_class_tokens,
                     export_features, init_reference_model, load_class_tokens)

__all__ = [
    "ExportError",
    "ExportManifest",
    "export_class_tokens",
    "export_features",
    "init_reference_model",
    "load_class_tokens",
]
