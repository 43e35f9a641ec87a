"""Incremental active learning for visual triple completion with
query-by-category sampling."""

__version__ = "0.1.0"
