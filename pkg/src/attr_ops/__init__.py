"""Attribute operators for compositional zero-shot recognition."""

__version__ = "0.1.0"

from .models import DatasetBundle, EvalReport, ModelParams

__all__ = ["DatasetBundle", "EvalReport", "ModelParams"]
