"""Cross-sample-augmented test-time adaptation for streaming MAP forecasting
and hypotension event detection."""

__version__ = "0.1.0"
