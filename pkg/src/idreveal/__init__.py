"""Identity-aware fake detection on 3DMM feature sequences.

A temporal embedding network learns how each person moves; a test video is
flagged when its embeddings stray too far from pristine reference videos of
the identity it claims.  Everything runs on numpy in double precision.
"""
from .errors import IDRevealError
from .features import FEATURE_DIM, FeatureFrame, FeatureSequence

__version__ = "0.1.0"

__all__ = ["FEATURE_DIM", "FeatureFrame", "FeatureSequence", "IDRevealError", "__version__"]
