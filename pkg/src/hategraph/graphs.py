"""Weight-graph and instance-subgraph construction from projected features.

A video with N segments yields 3N nodes (one per modality per segment).
Edges come in three kinds: temporal (same modality, adjacent segments),
epsilon (same modality, cosine distance below a threshold) and intermodal
(all three pairs at one timestamp).  An edge that qualifies as both
temporal and epsilon is stored once, tagged temporal.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .segmentation import InstancePartition

MODALITIES = ("visual", "audio", "text")

TEMPORAL = "temporal"
EPSILON = "epsilon"
INTERMODAL = "intermodal"


class ZeroNormWarning(UserWarning):
    """A representation vector had zero norm; its cosine distance is defined as 1."""


@dataclass(frozen=True, eq=False)
class Node:
    modality: str
    segment_index: int
    representation: np.ndarray

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")


@dataclass
class VideoGraph:
    """Undirected graph; ``edges[i]`` is an index pair (u < v) tagged ``kinds[i]``."""

    nodes: list[Node]
    edges: list[tuple[int, int]]
    kinds: list[str]

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    def edge_set(self) -> set[tuple[int, int]]:
        return set(self.edges)

    def adjacency(self, self_loops: bool = False) -> np.ndarray:
        """Dense symmetric 0/1 adjacency, mainly for the GNN and for oracles."""
        n = self.n_nodes
        adj = np.zeros((n, n), dtype=np.float64)
        for u, v in self.edges:
            adj[u, v] = adj[v, u] = 1.0
        if self_loops:
            adj[np.diag_indices(n)] = 1.0
        return adj

    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.n_nodes, dtype=np.int64)
        for u, v in self.edges:
            deg[u] += 1
            deg[v] += 1
        return deg

    def representations(self) -> np.ndarray:
        return np.stack([node.representation for node in self.nodes])


def cosine_distance(u: np.ndarray, v: np.ndarray) -> float:
    """1 - cos(u, v), in [0, 2]; zero-norm inputs map to 1 with a warning."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        warnings.warn(
            "zero-norm representation, cosine distance defined as 1",
            ZeroNormWarning,
            stacklevel=2,
        )
        return 1.0
    cos = float(np.dot(u, v) / (nu * nv))
    cos = min(1.0, max(-1.0, cos))
    return 1.0 - cos


def _pairwise_cosine_distance(features: np.ndarray) -> np.ndarray:
    """All-pairs cosine distance for the rows of an (n, d) block."""
    feats = np.asarray(features, dtype=np.float64)
    norms = np.linalg.norm(feats, axis=1)
    zero = norms == 0.0
    if zero.any():
        warnings.warn(
            "zero-norm representation, cosine distance defined as 1",
            ZeroNormWarning,
            stacklevel=3,
        )
    safe = np.where(zero, 1.0, norms)
    unit = feats / safe[:, None]
    cos = np.clip(unit @ unit.T, -1.0, 1.0)
    dist = 1.0 - cos
    dist[zero, :] = 1.0
    dist[:, zero] = 1.0
    return dist


def build_modality_edges(features: np.ndarray, epsilon: float) -> tuple[list[tuple[int, int]], list[str]]:
    """Temporal chain plus strict-threshold epsilon edges for one modality block."""
    n = features.shape[0]
    edges = [(i, i + 1) for i in range(n - 1)]
    kinds = [TEMPORAL] * len(edges)
    if epsilon > 0 and n > 2:
        dist = _pairwise_cosine_distance(features)
        for i in range(n):
            for j in range(i + 1, n):
                if j == i + 1:
                    continue  # already temporal
                if dist[i, j] < epsilon:
                    edges.append((i, j))
                    kinds.append(EPSILON)
    return edges, kinds


def build_intermodal_edges(n: int) -> list[tuple[int, int]]:
    """Pairwise edges between the three modality nodes at each timestamp.

    Node indexing convention: visual t, audio N+t, text 2N+t.
    """
    edges = []
    for t in range(n):
        edges.append((t, n + t))
        edges.append((t, 2 * n + t))
        edges.append((n + t, 2 * n + t))
    return edges


def _nodes_for_blocks(blocks, segment_indices) -> list[Node]:
    nodes = []
    for modality, block in zip(MODALITIES, blocks):
        for local, seg in enumerate(segment_indices):
            nodes.append(Node(modality, int(seg), block[local]))
    return nodes


def build_weight_graph(projected, epsilon: float) -> VideoGraph:
    """Graph over all 3N nodes of a video.

    ``projected`` is the (visual, audio, text) triple of (N, D) blocks.
    """
    visual, audio, text = projected
    n = visual.shape[0]
    if audio.shape[0] != n or text.shape[0] != n:
        raise ValueError(
            f"modalities disagree on N: {visual.shape[0]}, {audio.shape[0]}, {text.shape[0]}"
        )
    edges: list[tuple[int, int]] = []
    kinds: list[str] = []
    for m, block in enumerate((visual, audio, text)):
        offset = m * n
        block_edges, block_kinds = build_modality_edges(block, epsilon)
        edges.extend((u + offset, v + offset) for u, v in block_edges)
        kinds.extend(block_kinds)
    inter = build_intermodal_edges(n)
    edges.extend(inter)
    kinds.extend([INTERMODAL] * len(inter))
    nodes = _nodes_for_blocks((visual, audio, text), range(n))
    return VideoGraph(nodes=nodes, edges=edges, kinds=kinds)


def build_instance_subgraphs(
    projected, partition: InstancePartition, epsilon: float
) -> list[VideoGraph]:
    """One subgraph per instance, built the same way as the weight graph.

    Each subgraph holds only its instance's segments; temporal and epsilon
    edges are evaluated within the subgraph, intermodal per timestamp.
    """
    visual, audio, text = projected
    if visual.shape[0] != partition.n_segments:
        raise ValueError(
            f"partition covers {partition.n_segments} segments, features have {visual.shape[0]}"
        )
    subgraphs = []
    for group in partition.groups:
        idx = list(group)
        sub_blocks = (visual[idx], audio[idx], text[idx])
        sub = build_weight_graph(sub_blocks, epsilon)
        sub.nodes = _nodes_for_blocks(sub_blocks, idx)
        subgraphs.append(sub)
    return subgraphs


def export_edge_list(graph: VideoGraph, path) -> None:
    """Debug dump: one ``src dst kind`` line per edge."""
    lines = [f"{u} {v} {kind}" for (u, v), kind in zip(graph.edges, graph.kinds)]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))
