"""Pan-sharpening toolkit: Brovey-family fusion, NSCT, and fusion quality metrics."""

__version__ = "0.1.0"
