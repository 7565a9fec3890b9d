"""Template-based feature aggregation for unsupervised anomaly detection."""

__version__ = "0.1.0"
