"""Per-device semantic extractors sized by iterative knowledge distillation."""

__version__ = "0.1.0"
