"""Dual-stream graph network for hateful video classification.

Per-segment multimodal embeddings are projected to a common width, turned
into a weight graph (which scores instance importance) and per-instance
subgraphs (which produce instance features), and combined into a video-level
prediction with explainable instance weights.
"""

__version__ = "0.1.0"
