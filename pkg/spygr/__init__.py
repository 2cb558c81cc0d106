"""
SpyGR - spatial pyramid graph reasoning on grid features.

Numerical library (tensor core, graph-reasoning layer, pyramid, cost model),
a desk-scale segmentation harness and the `spygr.run` command line.
"""

__version__ = "0.3.0"
