"""Deep scan context: segment-graph LiDAR place recognition in numpy."""

__version__ = "0.1.0"
