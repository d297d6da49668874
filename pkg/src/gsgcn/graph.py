"""Skeleton graphs and the disentangled multi-scale adjacencies built from them."""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAX_SCALE = 8

CROWDPOSE14_JOINTS = (
    "left_shoulder", "right_shoulder", "left_elbow", "right_elbow",
    "left_wrist", "right_wrist", "left_hip", "right_hip",
    "left_knee", "right_knee", "left_ankle", "right_ankle",
    "head_top", "neck",
)

LAYOUTS: dict[str, tuple[int, tuple[tuple[int, int], ...]]] = {
    "crowdpose14": (
        14,
        (
            (12, 13), (13, 0), (13, 1), (0, 2), (2, 4), (1, 3), (3, 5),
            (13, 6), (13, 7), (6, 8), (8, 10), (7, 9), (9, 11),
        ),
    ),
    "path3": (3, ((0, 1), (1, 2))),
}


@dataclass(frozen=True)
class SkeletonGraph:
    num_joints: int
    edges: tuple[tuple[int, int], ...]

    def __post_init__(self):
        seen = set()
        for i, j in self.edges:
            if i == j:
                raise ValueError(f"self-loop on joint {i}")
            if not (0 <= i < self.num_joints and 0 <= j < self.num_joints):
                raise ValueError(f"edge ({i}, {j}) outside 0..{self.num_joints - 1}")
            key = (min(i, j), max(i, j))
            if key in seen:
                raise ValueError(f"duplicate edge {key}")
            seen.add(key)
        if np.isinf(hop_distances(self)).any():
            raise ValueError("skeleton graph must be connected")


def build_skeleton_graph(layout_name: str) -> SkeletonGraph:
    """Look up a registered layout, or load ``{"num_joints", "edges"}`` from a ``.json`` path."""
    if layout_name in LAYOUTS:
        k, edges = LAYOUTS[layout_name]
        return SkeletonGraph(k, edges)
    if layout_name.endswith(".json") and Path(layout_name).is_file():
        return load_layout(layout_name)
    raise KeyError(
        f"unknown skeleton layout {layout_name!r}; registered: {', '.join(sorted(LAYOUTS))}"
    )


def load_layout(path) -> SkeletonGraph:
    spec = json.loads(Path(path).read_text())
    return SkeletonGraph(int(spec["num_joints"]), tuple(tuple(int(v) for v in e) for e in spec["edges"]))


def hop_distances(graph: SkeletonGraph) -> np.ndarray:
    """All-pairs shortest-path hop counts by BFS; ``inf`` for unreachable pairs."""
    n = graph.num_joints
    nbrs: list[list[int]] = [[] for _ in range(n)]
    for i, j in graph.edges:
        nbrs[i].append(j)
        nbrs[j].append(i)
    dist = np.full((n, n), np.inf)
    for src in range(n):
        dist[src, src] = 0
        q = deque([src])
        while q:
            u = q.popleft()
            for v in nbrs[u]:
                if np.isinf(dist[src, v]):
                    dist[src, v] = dist[src, u] + 1
                    q.append(v)
    return dist


def k_hop_adjacency(graph: SkeletonGraph, k: int) -> np.ndarray:
    """0/1 matrix marking joint pairs exactly ``k`` hops apart."""
    if k < 1:
        raise ValueError("k must be >= 1")
    return (hop_distances(graph) == k).astype(np.float64)


def normalize_adjacency(A: np.ndarray) -> np.ndarray:
    """Symmetric normalization with self-loops: D^-1/2 (A + I) D^-1/2."""
    A = np.asarray(A, dtype=np.float64)
    At = A + np.eye(A.shape[0])
    d = At.sum(axis=1)
    inv = 1.0 / np.sqrt(d)
    return At * inv[:, None] * inv[None, :]


def window_adjacency(A_norm: np.ndarray, tau: int) -> np.ndarray:
    """Dense ``tau x tau`` tiling of ``A_norm``: every frame pair in the window is connected."""
    if tau < 1 or tau % 2 == 0:
        raise ValueError("window size must be a positive odd integer")
    return np.tile(A_norm, (tau, tau))


@dataclass
class AdjacencySet:
    scales: np.ndarray  # (S, K, K)
    windowed: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)

    def windowed_stack(self, tau: int) -> np.ndarray:
        """(S, tau*K, tau*K) stack of windowed matrices for one window size."""
        return np.stack([self.windowed[(tau, s)] for s in range(1, len(self.scales) + 1)])


def build_adjacency_set(
    graph: SkeletonGraph, num_scales: int = MAX_SCALE, windows=(3, 5)
) -> AdjacencySet:
    scales = np.stack([normalize_adjacency(k_hop_adjacency(graph, k)) for k in range(1, num_scales + 1)])
    windowed = {
        (tau, s + 1): window_adjacency(scales[s], tau) for tau in windows for s in range(num_scales)
    }
    return AdjacencySet(scales, windowed)
