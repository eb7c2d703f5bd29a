"""BI-RADS breast density from breast ultrasound: histogram features, evaluation and risk modeling."""

__version__ = "0.1.0"
