"""Attention-guided concept model.

Concept-bottleneck prediction from patch-level visual input plus temporal
acoustic concepts.  The model emits per-concept probabilities and spatial
attention maps alongside the task output, so every prediction is traceable
to named concepts and image regions.
"""

__version__ = "0.1.0"
