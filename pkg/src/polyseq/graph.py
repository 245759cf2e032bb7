"""Polygon and road-graph structures, permutation encoding/decoding, and
raster-to-vector conversion (crack-following contours + Douglas-Peucker).

Coordinates are continuous image coordinates with ``y`` pointing down; pixel
``(row, col)`` covers ``[col, col+1] x [row, row+1]``. A ring is clockwise
(as seen on screen) when its shoelace sum is positive.
"""
from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

log = logging.getLogger(__name__)


def signed_area(pts: np.ndarray) -> float:
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def _drop_repeats(pts: np.ndarray) -> np.ndarray:
    if len(pts) == 0:
        return pts
    keep = np.any(pts != np.roll(pts, 1, axis=0), axis=1)
    if not keep.any():
        return pts[:1]
    return pts[keep]


@dataclass(eq=False)
class PolygonRing:
    """Implicitly closed ring; consecutive duplicate vertices are removed on construction."""

    vertices: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 2)
        pts = _drop_repeats(pts)
        if len(pts) < 3:
            raise ValueError(f"ring needs >= 3 distinct vertices, got {len(pts)}")
        self.vertices = pts

    def __len__(self) -> int:
        return len(self.vertices)

    @property
    def area(self) -> float:
        return signed_area(self.vertices)

    @property
    def clockwise(self) -> bool:
        return self.area > 0

    def oriented(self, clockwise: bool = True) -> "PolygonRing":
        if self.clockwise == clockwise:
            return self
        return PolygonRing(self.vertices[::-1].copy())

    def translated(self, dx: float, dy: float) -> "PolygonRing":
        return PolygonRing(self.vertices + np.array([dx, dy]))

    def same_cycle(self, other: "PolygonRing", tol: float = 0.0) -> bool:
        """True when ``other`` is a cyclic rotation of this ring (same direction)."""
        a, b = self.vertices, other.vertices
        if a.shape != b.shape:
            return False
        for k in range(len(a)):
            if np.all(np.abs(np.roll(b, -k, axis=0) - a) <= tol):
                return True
        return False


@dataclass(eq=False)
class PolygonSet:
    shells: list[PolygonRing] = field(default_factory=list)
    holes: dict[int, list[PolygonRing]] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.shells)

    def polygons(self):
        """Yield ``(shell, holes)`` pairs."""
        for i, s in enumerate(self.shells):
            yield s, self.holes.get(i, [])

    @property
    def n_vertices(self) -> int:
        return sum(len(s) for s in self.shells) + sum(len(h) for hs in self.holes.values() for h in hs)

    def translated(self, dx: float, dy: float) -> "PolygonSet":
        return PolygonSet([s.translated(dx, dy) for s in self.shells],
                          {i: [h.translated(dx, dy) for h in hs] for i, hs in self.holes.items()})


@dataclass
class RoadGraph:
    nodes: np.ndarray
    edges: list[tuple[int, int]]
    instance_map: list[int] = field(default_factory=list)

    def __post_init__(self):
        self.nodes = np.asarray(self.nodes, dtype=np.float64).reshape(-1, 2)
        self.edges = sorted({(min(a, b), max(a, b)) for a, b in self.edges})
        if any(a == b for a, b in self.edges):
            raise ValueError("road graph cannot contain self-loops")

    def degree(self) -> np.ndarray:
        deg = np.zeros(len(self.nodes), dtype=np.int64)
        for a, b in self.edges:
            deg[a] += 1
            deg[b] += 1
        return deg

    def edge_set(self) -> set:
        """Edges as unordered pairs of coordinate tuples (node-index independent)."""
        return {frozenset((tuple(self.nodes[a]), tuple(self.nodes[b]))) for a, b in self.edges}


# -- permutation matrices ------------------------------------------------------

def build_gt_permutation(slot_map, n_vertices: int, n_slots: int) -> np.ndarray:
    """Row ``i`` holds a single 1 at the clockwise successor of slot ``i``.

    ``slot_map[i] = (ring_id, position)``; slots ``>= n_vertices`` are
    self-connected.
    """
    if n_vertices > n_slots:
        raise ValueError(f"{n_vertices} vertices exceed {n_slots} slots")
    perm = np.zeros((n_slots, n_slots), dtype=np.int64)
    rings: dict[int, list[tuple[int, int]]] = {}
    for slot, (ring, pos) in enumerate(slot_map[:n_vertices]):
        rings.setdefault(ring, []).append((pos, slot))
    for ring, members in rings.items():
        if len(members) < 3:
            raise ValueError(f"ring {ring} has {len(members)} slots; need >= 3")
        slots = [s for _, s in sorted(members)]
        for a, b in zip(slots, slots[1:] + slots[:1]):
            perm[a, b] = 1
    for i in range(n_vertices, n_slots):
        perm[i, i] = 1
    return perm


def build_road_permutation(edge_slots, n_slots: int) -> np.ndarray:
    """Each edge's two endpoint slots point at each other; unused slots self-connect."""
    perm = np.eye(n_slots, dtype=np.int64)
    for a, b in edge_slots:
        perm[a, a] = perm[b, b] = 0
        perm[a, b] = perm[b, a] = 1
    return perm


def _successors(perm: np.ndarray) -> np.ndarray:
    """Row-wise argmax; for a valid permutation this is the successor pointer."""
    perm = np.asarray(perm)
    if perm.size == 0:
        return np.zeros(len(perm), dtype=np.int64)
    return perm.argmax(axis=1)


def decode_rings(vertices, perm, stats: Counter | None = None) -> PolygonSet:
    """Walk successor cycles; keep cycles of length >= 3 as shells."""
    stats = stats if stats is not None else Counter()
    perm = np.asarray(perm)
    n = perm.shape[0]
    nv = len(vertices)
    if nv > n:
        raise ValueError(f"{nv} vertices but permutation has {n} rows")
    succ = _successors(perm)
    seen = np.zeros(n, dtype=bool)
    shells = []
    for start in range(nv):
        if seen[start]:
            continue
        cycle = []
        i = start
        while not seen[i]:
            seen[i] = True
            cycle.append(i)
            i = succ[i]
        if i != start or any(c >= nv for c in cycle):
            # not a closed cycle among real vertices (invalid permutation or pad link)
            stats["broken_cycles"] += 1
            continue
        if len(cycle) < 3:
            if len(cycle) > 1:
                stats["short_cycles"] += 1
            continue
        try:
            shells.append(PolygonRing(np.asarray([vertices[c] for c in cycle])))
        except ValueError:
            stats["degenerate_rings"] += 1
    return PolygonSet(shells)


def instance_map_from_vertices(vertices) -> list[int]:
    """Group slots with identical coordinates into one node."""
    index: dict[tuple, int] = {}
    out = []
    for v in vertices:
        key = (float(v[0]), float(v[1]))
        out.append(index.setdefault(key, len(index)))
    return out


def decode_road_graph(vertices, perm, instance_map=None, stats: Counter | None = None) -> RoadGraph:
    stats = stats if stats is not None else Counter()
    perm = np.asarray(perm)
    nv = len(vertices)
    if instance_map is None:
        instance_map = instance_map_from_vertices(vertices)
    n_nodes = max(instance_map, default=-1) + 1
    nodes = np.zeros((n_nodes, 2))
    for slot, node in enumerate(instance_map[:nv]):
        nodes[node] = vertices[slot]
    succ = _successors(perm)
    edges = set()
    for i in range(nv):
        j = succ[i]
        if j == i:
            continue
        if j >= nv:
            stats["pad_links"] += 1
            continue
        a, b = instance_map[i], instance_map[j]
        if a == b:
            stats["same_node_links"] += 1
            continue
        edges.add((min(a, b), max(a, b)))
    return RoadGraph(nodes, sorted(edges), list(instance_map[:nv]))


def validate_permutation(perm) -> dict:
    perm = np.asarray(perm)
    rows = perm.sum(axis=1)
    cols = perm.sum(axis=0)
    report = {
        "n": int(perm.shape[0]),
        "bad_rows": [int(i) for i in np.nonzero(rows != 1)[0]],
        "bad_cols": [int(j) for j in np.nonzero(cols != 1)[0]],
        "binary": bool(np.all((perm == 0) | (perm == 1))),
        "cycles": {},
    }
    report["valid"] = not report["bad_rows"] and not report["bad_cols"] and report["binary"]
    if report["valid"]:
        succ = _successors(perm)
        seen = np.zeros(len(succ), dtype=bool)
        census: Counter = Counter()
        for s in range(len(succ)):
            if seen[s]:
                continue
            k, i = 0, s
            while not seen[i]:
                seen[i] = True
                i = succ[i]
                k += 1
            census[k] += 1
        report["cycles"] = dict(sorted(census.items()))
    return report


# -- Douglas-Peucker -----------------------------------------------------------

def point_segment_distance(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distance from each point in ``p`` (k, 2) to segment ``a``-``b``."""
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        return np.hypot(*(p - a).T)
    t = np.clip((p - a) @ ab / denom, 0.0, 1.0)
    proj = a + t[:, None] * ab
    return np.hypot(*(p - proj).T)


def _dp_keep(pts: np.ndarray, epsilon: float) -> np.ndarray:
    keep = np.zeros(len(pts), dtype=bool)
    keep[0] = keep[-1] = True
    stack = [(0, len(pts) - 1)]
    while stack:
        lo, hi = stack.pop()
        if hi - lo < 2:
            continue
        d = point_segment_distance(pts[lo + 1:hi], pts[lo], pts[hi])
        k = int(np.argmax(d))
        if d[k] > epsilon:
            mid = lo + 1 + k
            keep[mid] = True
            stack.append((lo, mid))
            stack.append((mid, hi))
    return keep


def douglas_peucker(points, epsilon: float, closed: bool = False) -> np.ndarray:
    """Simplify a polyline (or closed ring) keeping a subset of its vertices in order."""
    if epsilon < 0:
        raise ValueError(f"epsilon must be >= 0, got {epsilon}")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) < 3 or (closed and len(pts) <= 3):
        return pts.copy()
    if not closed:
        return pts[_dp_keep(pts, epsilon)]
    diff = pts[:, None, :] - pts[None, :, :]
    d2 = np.einsum("ijk,ijk->ij", diff, diff)
    i, j = np.unravel_index(int(np.argmax(d2)), d2.shape)
    i, j = min(i, j), max(i, j)
    n = len(pts)
    keep = np.zeros(n, dtype=bool)
    first = np.arange(i, j + 1)
    second = np.concatenate([np.arange(j, n), np.arange(0, i + 1)])
    keep[first[_dp_keep(pts[first], epsilon)]] = True
    keep[second[_dp_keep(pts[second], epsilon)]] = True
    if keep.sum() < 3:
        # keep the ring non-degenerate: add the vertex farthest from the chord
        d = point_segment_distance(pts, pts[i], pts[j])
        d[keep] = -1.0
        keep[int(np.argmax(d))] = True
    return pts[keep]


def remove_collinear(pts: np.ndarray) -> np.ndarray:
    """Drop ring vertices lying exactly on the line through their neighbours."""
    prev = np.roll(pts, 1, axis=0)
    nxt = np.roll(pts, -1, axis=0)
    cross = (pts[:, 0] - prev[:, 0]) * (nxt[:, 1] - pts[:, 1]) - (pts[:, 1] - prev[:, 1]) * (nxt[:, 0] - pts[:, 0])
    keep = cross != 0
    return pts[keep] if keep.sum() >= 3 else pts


# -- mask -> polygons -----------------------------------------------------------

_TOP, _RIGHT, _BOTTOM, _LEFT = range(4)
# start offset, end offset (x, y) for each pixel side, walking with foreground on the right
_SIDES = {
    _TOP: ((0, 0), (1, 0)),
    _RIGHT: ((1, 0), (1, 1)),
    _BOTTOM: ((1, 1), (0, 1)),
    _LEFT: ((0, 1), (0, 0)),
}


def trace_contours(mask: np.ndarray) -> list[tuple[np.ndarray, tuple[int, int]]]:
    """Closed crack contours on the pixel-corner lattice.

    Outer boundaries come out clockwise, hole boundaries counter-clockwise.
    Diagonal foreground contacts are joined (8-connected foreground). Returns
    ``(vertices, (row, col))`` with a foreground pixel adjacent to the contour.
    """
    m = np.pad(np.asarray(mask, dtype=bool), 1)
    fg = m[1:-1, 1:-1]
    neighbours = {
        _TOP: m[:-2, 1:-1], _RIGHT: m[1:-1, 2:], _BOTTOM: m[2:, 1:-1], _LEFT: m[1:-1, :-2],
    }
    outgoing: dict[tuple[int, int], list[tuple[int, int, tuple[int, int]]]] = {}
    for side, nb in neighbours.items():
        rows, cols = np.nonzero(fg & ~nb)
        (sx, sy), (ex, ey) = _SIDES[side]
        for r, c in zip(rows.tolist(), cols.tolist()):
            start = (c + sx, r + sy)
            outgoing.setdefault(start, []).append((ex - sx, ey - sy, (r, c)))
    contours = []
    # starting at the raster-first vertex never starts on an unvisited saddle
    for start in sorted(outgoing, key=lambda p: (p[1], p[0])):
        while outgoing.get(start):
            dx, dy, pix = outgoing[start].pop(0)
            pts = [start]
            cur = (start[0] + dx, start[1] + dy)
            while cur != start:
                opts = outgoing[cur]
                choice = 0
                if len(opts) > 1:
                    left = (dy, -dx)
                    choice = next((k for k, o in enumerate(opts) if (o[0], o[1]) == left), 0)
                dx, dy, _ = opts.pop(choice)
                pts.append(cur)
                cur = (cur[0] + dx, cur[1] + dy)
            contours.append((np.asarray(pts, dtype=np.float64), pix))
    return contours


def mask_to_polygons(mask, epsilon: float = 1.0) -> PolygonSet:
    """Vectorize a binary mask: shells for 8-connected components, holes inside them."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return PolygonSet()
    labels, _ = ndimage.label(mask, structure=np.ones((3, 3), dtype=int))
    shells: dict[int, PolygonRing] = {}
    holes: dict[int, list[PolygonRing]] = {}
    for pts, (r, c) in trace_contours(mask):
        pts = remove_collinear(pts)
        pts = douglas_peucker(pts, epsilon, closed=True)
        try:
            ring = PolygonRing(pts)
        except ValueError:
            continue
        comp = int(labels[r, c])
        if ring.area > 0:
            if comp in shells:
                # a component has exactly one outer contour; keep the larger if tracing split it
                if ring.area <= shells[comp].area:
                    continue
            shells[comp] = ring
        else:
            holes.setdefault(comp, []).append(ring)
    order = sorted(shells)
    out = PolygonSet([shells[k] for k in order])
    for i, k in enumerate(order):
        if k in holes:
            out.holes[i] = holes[k]
    return out
