"""Collaborative filtering with cross-dot-product fusion of graph features
and attribute features.

The pipeline: ingest interactions and attributes (:mod:`crossfuse.data`),
build interaction and similarity graphs (:mod:`crossfuse.graph`), extract
graph features with a propagation backbone (:mod:`crossfuse.backbone`) and
attribute features with a small convolutional network
(:mod:`crossfuse.auxnet`), couple the two with score-agreement losses
(:mod:`crossfuse.fusion`), train in two stages (:mod:`crossfuse.trainer`),
and evaluate top-N ranking quality (:mod:`crossfuse.evaluate`).
"""

__version__ = "0.1.0"
