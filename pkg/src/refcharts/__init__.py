"""Distribution-aware reference charts for per-scan structure measurements."""

__version__ = "0.1.0"
