"""Forward modelling and inversion of bias-tuned defect spectroscopy."""

__version__ = "0.1.0"
