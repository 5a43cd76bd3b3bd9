"""Part-aligned person re-identification at desk scale.

Sliding-window vertical part detection, attention-based horizontal
refinement, part-level feature learning, stage-wise training, and
retrieval evaluation, built on a minimal hand-differentiated operator set.
"""

__version__ = "0.1.0"
