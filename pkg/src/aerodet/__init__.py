"""Small-object detection toolkit for aerial imagery.

Provides a diagonal state-space scan core, a bidirectional SSM image
encoder, tiled (sliced) inference over a pluggable detector, DOTA-v1.5
annotation conversion, detection evaluation metrics, and exact
finite-alphabet information-theory checks.
"""

__version__ = "0.1.0"
