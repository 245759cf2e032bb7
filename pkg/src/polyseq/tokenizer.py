"""Coordinate quantization and fixed-length vertex token sequences.

Token layout: ``[BOS, x1, y1, ..., xn, yn, EOS, PAD, ...]`` with total length
``2 * n_slots + 2``. Coordinate tokens are ``0 .. n_bins-1``; the three
special tokens follow them.
"""
from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .graph import PolygonRing, PolygonSet, RoadGraph

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Vocabulary:
    n_bins: int

    @property
    def bos_id(self) -> int:
        return self.n_bins

    @property
    def eos_id(self) -> int:
        return self.n_bins + 1

    @property
    def pad_id(self) -> int:
        return self.n_bins + 2

    @property
    def vocab_size(self) -> int:
        return self.n_bins + 3

    def is_coord(self, token: int) -> bool:
        return 0 <= token < self.n_bins


@dataclass(frozen=True)
class QuantizationGrid:
    image_width: float
    image_height: float
    n_bins: int

    def __post_init__(self):
        if self.n_bins < 2:
            raise ValueError(f"n_bins must be >= 2, got {self.n_bins}")
        if self.image_width <= 0 or self.image_height <= 0:
            raise ValueError("grid extent must be positive")

    @property
    def bin_width(self) -> tuple[float, float]:
        return self.image_width / self.n_bins, self.image_height / self.n_bins


@dataclass
class TokenSequence:
    tokens: np.ndarray
    n_vertices: int

    @property
    def length(self) -> int:
        return len(self.tokens)

    @property
    def logit_len(self) -> int:
        return len(self.tokens) - 1


def quantize_vertex(v, grid: QuantizationGrid, stats: Counter | None = None) -> tuple[int, int]:
    out = []
    for coord, extent in ((v[0], grid.image_width), (v[1], grid.image_height)):
        t = int(np.floor(coord / extent * grid.n_bins))
        if t < 0 or t >= grid.n_bins:
            if stats is not None:
                stats["clamped_coords"] += 1
            t = min(max(t, 0), grid.n_bins - 1)
        out.append(t)
    return out[0], out[1]


def quantize(points: np.ndarray, grid: QuantizationGrid) -> np.ndarray:
    """Vectorized ``quantize_vertex`` over an (n, 2) array (clamps silently)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    ext = np.array([grid.image_width, grid.image_height])
    return np.clip(np.floor(pts / ext * grid.n_bins), 0, grid.n_bins - 1).astype(np.int64)


def dequantize_token(tx: int, ty: int, grid: QuantizationGrid) -> tuple[float, float]:
    if not (0 <= tx < grid.n_bins and 0 <= ty < grid.n_bins):
        raise ValueError(f"({tx}, {ty}) is not a pair of coordinate tokens")
    bw, bh = grid.bin_width
    return (tx + 0.5) * bw, (ty + 0.5) * bh


def _topleft_index(pts: np.ndarray) -> int:
    return int(np.lexsort((pts[:, 0], pts[:, 1]))[0])


def canonical_ring(ring: PolygonRing) -> PolygonRing:
    """Clockwise, starting at the topmost-leftmost vertex."""
    r = ring.oriented(clockwise=True)
    k = _topleft_index(r.vertices)
    return PolygonRing(np.roll(r.vertices, -k, axis=0))


def canonical_rings(polys: PolygonSet) -> list[PolygonRing]:
    """Shells in raster order of their topmost-leftmost vertex, each canonicalized."""
    rings = [canonical_ring(s) for s in polys.shells]
    return sorted(rings, key=lambda r: (r.vertices[0, 1], r.vertices[0, 0], len(r)))


def fit_to_capacity(rings: list[PolygonRing], n_slots: int,
                    stats: Counter | None = None) -> list[PolygonRing]:
    """Drop rings smallest-area first until the vertex total fits ``n_slots``."""
    total = sum(len(r) for r in rings)
    if total <= n_slots:
        return rings
    order = sorted(range(len(rings)), key=lambda i: (abs(rings[i].area), len(rings[i]), i))
    dropped = set()
    for i in order:
        if total <= n_slots:
            break
        dropped.add(i)
        total -= len(rings[i])
    if stats is not None:
        stats["dropped_rings"] += len(dropped)
    log.warning("dropped %d ring(s) to fit %d vertex slots", len(dropped), n_slots)
    return [r for i, r in enumerate(rings) if i not in dropped]


def frame_tokens(coord_tokens: np.ndarray, vocab: Vocabulary, n_slots: int) -> np.ndarray:
    """``[BOS, coords..., EOS, PAD...]`` of length ``2 * n_slots + 2``."""
    flat = np.asarray(coord_tokens, dtype=np.int64).reshape(-1)
    if len(flat) > 2 * n_slots:
        raise ValueError(f"{len(flat) // 2} vertices exceed {n_slots} slots")
    seq = np.full(2 * n_slots + 2, vocab.pad_id, dtype=np.int64)
    seq[0] = vocab.bos_id
    seq[1:1 + len(flat)] = flat
    seq[1 + len(flat)] = vocab.eos_id
    return seq


def build_vertex_sequence(polys: PolygonSet, grid: QuantizationGrid, vocab: Vocabulary,
                          n_slots: int, strict: bool = False, stats: Counter | None = None):
    """Token sequence plus ``slot_map[i] = (ring_id, position)`` over canonical rings.

    With ``strict`` an over-capacity scene raises; otherwise the smallest rings
    are dropped. Holes are not encoded (the sequence carries shells only).
    """
    if polys.holes and stats is not None:
        stats["holes_not_encoded"] += sum(len(h) for h in polys.holes.values())
    rings = canonical_rings(polys)
    total = sum(len(r) for r in rings)
    if total > n_slots:
        if strict:
            raise ValueError(f"scene has {total} vertices, capacity is {n_slots}")
        rings = fit_to_capacity(rings, n_slots, stats)
    slot_map = [(ri, k) for ri, r in enumerate(rings) for k in range(len(r))]
    coords = quantize(np.concatenate([r.vertices for r in rings]), grid) if rings else np.zeros((0, 2), int)
    seq = TokenSequence(frame_tokens(coords, vocab, n_slots), len(slot_map))
    return seq, slot_map


def build_road_sequence(graph: RoadGraph, grid: QuantizationGrid, vocab: Vocabulary, n_slots: int):
    """One slot per (node, incident edge). Returns ``(seq, instance_map, edge_slots)``.

    Nodes are ordered by raster position; a node's slots follow its
    neighbours in raster order.
    """
    deg = graph.degree()
    if deg.sum() > n_slots:
        raise ValueError(f"road graph needs {deg.sum()} slots, capacity is {n_slots}")
    order = list(np.lexsort((graph.nodes[:, 0], graph.nodes[:, 1])))
    rank = {int(n): i for i, n in enumerate(order)}
    adj: dict[int, list[int]] = {i: [] for i in range(len(graph.nodes))}
    for a, b in graph.edges:
        adj[a].append(b)
        adj[b].append(a)
    slot_of: dict[tuple[int, int], int] = {}
    instance_map, coords = [], []
    for n in order:
        n = int(n)
        if not adj[n]:
            continue
        for nb in sorted(adj[n], key=lambda m: rank[m]):
            slot_of[(n, nb)] = len(instance_map)
            instance_map.append(rank[n])
            coords.append(graph.nodes[n])
    edge_slots = [(slot_of[(a, b)], slot_of[(b, a)]) for a, b in graph.edges]
    toks = quantize(np.asarray(coords).reshape(-1, 2), grid)
    # renumber nodes densely in slot order
    remap: dict[int, int] = {}
    instance_map = [remap.setdefault(k, len(remap)) for k in instance_map]
    return TokenSequence(frame_tokens(toks, vocab, n_slots), len(instance_map)), instance_map, edge_slots


def sequence_to_vertices(seq, grid: QuantizationGrid, vocab: Vocabulary,
                         stats: Counter | None = None) -> list[tuple[float, float]]:
    """Dequantize coordinate pairs between the leading BOS and the first EOS."""
    stats = stats if stats is not None else Counter()
    tokens = np.asarray(seq.tokens if isinstance(seq, TokenSequence) else seq).tolist()
    start = 1 if tokens and tokens[0] == vocab.bos_id else 0
    coords = []
    for t in tokens[start:]:
        if t == vocab.eos_id:
            break
        if vocab.is_coord(t):
            coords.append(t)
        else:
            stats["stray_special_tokens"] += 1
    if len(coords) % 2:
        stats["dangling_tokens"] += 1
        coords = coords[:-1]
    return [dequantize_token(coords[i], coords[i + 1], grid) for i in range(0, len(coords), 2)]
