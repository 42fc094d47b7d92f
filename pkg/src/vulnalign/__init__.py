"""Cross-source vulnerability entity alignment with masked attribute aggregation and partitioned attention."""

__version__ = "0.1.0"
