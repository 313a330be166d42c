"""Toolkit for joint surgical phase / action-triplet / grounding pipelines.

Provides the structured output grammar with per-entity [SEG] markers, the
entity-grouped residual prompt fusion, the composite reasoning+grounding
loss, the three-task metric suite, the RLE annotation format, and a
desk-scale trainable model wired through all of it.
"""

__version__ = "0.1.0"

from .vocab import LabelSpace, load_label_space

__all__ = ["LabelSpace", "load_label_space", "__version__"]
