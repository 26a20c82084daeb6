"""Context-edge hybrid adapters and deep-supervised distillation for promptable segmentation."""

__version__ = "0.1.0"
