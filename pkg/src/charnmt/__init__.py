"""Character-level NMT toolkit with learned and fixed-stride source compression."""

__version__ = "0.1.0"
