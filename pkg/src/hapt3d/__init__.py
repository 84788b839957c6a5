"""Hierarchical panoptic segmentation of orchard point clouds.

One sparse-convolution encoder feeds three decoders (semantic labels,
tree-level offsets, trunk/fruit offsets); offsets are clustered with
HDBSCAN at inference time and scored with panoptic-quality metrics.
"""

__version__ = "0.1.0"
