"""Layered design generation with regional token packing, flow matching and
few-step distillation."""

__version__ = "0.1.0"
