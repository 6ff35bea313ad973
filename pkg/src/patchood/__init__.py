"""Few-shot OOD detection on embedding fixtures: foreground/background
decomposition, adaptive background suppression, confusable foreground
rectification, MCM/GL-MCM scoring and AUROC/FPR95 evaluation."""

from . import background, data, decomposition, foreground, metrics, scoring, textenc, trainer  # noqa: F401

__version__ = "0.1.0"
