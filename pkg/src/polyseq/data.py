"""Synthetic scenes, COCO-format persistence, augmentation and tiling.

Randomness comes from ``numpy.random.Generator(PCG64(seed))`` only, so a
``(seed, preset)`` pair regenerates the same scene on any platform.
Generated vertices sit at bin centres, so quantization is lossless for
ground truth.
"""
from __future__ import annotations

import json
import logging
import math
import os
from collections import Counter
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from PIL import Image
from scipy import ndimage
from scipy.spatial import Delaunay

from .graph import (PolygonRing, PolygonSet, RoadGraph, build_gt_permutation, build_road_permutation,
                    point_segment_distance, remove_collinear, signed_area)
from .metrics import rasterize
from .tokenizer import (QuantizationGrid, TokenSequence, Vocabulary, build_road_sequence,
                        build_vertex_sequence)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ScenePreset:
    name: str = "tiny"
    image_size: int = 64
    n_bins: int = 64
    n_slots: int = 16
    mode: str = "building"  # or "road"
    min_buildings: int = 1  # buildings per scene area; a scene window may show more pieces
    max_buildings: int = 3
    min_size: int = 10
    max_size: int = 28
    gap: int = 2
    shapes: tuple[str, ...] = ("rect", "L", "T")
    cut_prob: float = 0.25  # chance a building may run off the canvas edge
    max_attempts: int = 200

    @property
    def grid(self) -> QuantizationGrid:
        return QuantizationGrid(self.image_size, self.image_size, self.n_bins)

    @property
    def vocab(self) -> Vocabulary:
        return Vocabulary(self.n_bins)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["shapes"] = list(self.shapes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScenePreset":
        d = dict(d)
        if "shapes" in d:
            d["shapes"] = tuple(d["shapes"])
        return cls(**d)


PRESETS = {
    "tiny": ScenePreset(),
    "tiny-road": ScenePreset(name="tiny-road", mode="road", n_slots=16),
    "full": ScenePreset(name="full", image_size=224, n_bins=224, n_slots=192,
                        max_buildings=12, min_size=12, max_size=60),
}


@dataclass(eq=False)
class SceneSample:
    image: np.ndarray  # (H, W, 3) float in [0, 1]
    polygons: PolygonSet | None
    sequence: TokenSequence
    permutation: np.ndarray
    scene_id: str
    road: RoadGraph | None = None
    footprint: np.ndarray | None = None  # rendered foreground mask

    @property
    def mode(self) -> str:
        return "road" if self.road is not None else "building"


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


# -- shape generation ---------------------------------------------------------

def _shape_lattice(kind: str, w: int, h: int, rng: np.random.Generator) -> np.ndarray | None:
    """Integer vertices of a rectilinear outline inside the box [0, w] x [0, h]."""
    if kind == "rect":
        pts = [(0, 0), (w, 0), (w, h), (0, h)]
    elif kind == "L":
        if w < 6 or h < 6:
            return None
        cw = int(rng.integers(3, w - 2))
        ch = int(rng.integers(3, h - 2))
        pts = [(0, 0), (w - cw, 0), (w - cw, ch), (w, ch), (w, h), (0, h)]
    elif kind == "T":
        if w < 9 or h < 6:
            return None
        bh = int(rng.integers(3, h - 2))
        sw = int(rng.integers(3, w - 5))
        sx = int(rng.integers(3, w - sw - 2))
        pts = [(0, 0), (w, 0), (w, bh), (sx + sw, bh), (sx + sw, h), (sx, h), (sx, bh), (0, bh)]
    else:
        raise ValueError(f"unknown shape kind {kind!r}")
    pts = np.asarray(pts, dtype=np.float64)
    if rng.integers(2):
        pts[:, 0] = w - pts[:, 0]
    if rng.integers(2):
        pts[:, 1] = h - pts[:, 1]
    if rng.integers(2):
        pts = pts[:, ::-1].copy()
    return pts


def _texture(rng: np.random.Generator, size: int) -> np.ndarray:
    base = rng.uniform(0.1, 0.35, size=3)
    coarse = ndimage.zoom(rng.normal(0.0, 0.05, (size // 8, size // 8, 3)), (8, 8, 1), order=1)
    fine = rng.normal(0.0, 0.02, (size, size, 3))
    return np.clip(base + coarse + fine, 0.0, 1.0)


def _to_uint8_levels(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def clip_ring_to_box(pts: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Sutherland-Hodgman clip of a ring to the square ``[lo, hi]^2``."""
    out = np.asarray(pts, dtype=np.float64)
    for axis, bound, keep_below in ((0, lo, False), (0, hi, True), (1, lo, False), (1, hi, True)):
        if len(out) == 0:
            break
        inside = out[:, axis] <= bound if keep_below else out[:, axis] >= bound
        res = []
        for i in range(len(out)):
            cur, prev = out[i], out[i - 1]
            cin, pin = inside[i], inside[i - 1]
            if cin != pin:
                t = (bound - prev[axis]) / (cur[axis] - prev[axis])
                cross = prev + t * (cur - prev)
                cross[axis] = bound
                res.append(cross)
            if cin:
                res.append(cur)
        out = np.asarray(res).reshape(-1, 2)
    if len(out) < 3:
        return out
    keep = np.any(out != np.roll(out, 1, axis=0), axis=1)
    return remove_collinear(out[keep]) if keep.sum() >= 3 else out[keep]


def _window_counts(pts: np.ndarray, windows: list[tuple[int, int]], side: int, bw: float) -> np.ndarray | None:
    """Vertices of ``pts`` clipped to each ``side``-px window, at the half-bin border a patch scene uses.

    None when the clipped outline of some window does not cover exactly the
    pixels the building paints there (a sliver along the border), since those
    pixels would be drawn without a label.
    """
    counts = np.zeros(len(windows), dtype=np.int64)
    x0, y0 = pts.min(0)
    x1, y1 = pts.max(0)
    for i, (ox, oy) in enumerate(windows):
        if x1 <= ox or y1 <= oy or x0 >= ox + side or y0 >= oy + side:
            continue
        local = pts - [ox, oy]
        clipped = clip_ring_to_box(local, 0.5 * bw, side - 0.5 * bw)
        painted = rasterize(PolygonSet([PolygonRing(local)]), side, side)
        if len(clipped) < 3 or signed_area(clipped) == 0:
            if painted.any():
                return None
            continue
        if not np.array_equal(rasterize(PolygonSet([PolygonRing(clipped)]), side, side), painted):
            return None
        counts[i] = len(clipped)
    return counts


def _place_buildings(rng: np.random.Generator, preset: ScenePreset, n_bins: int, target: int,
                     capacity: int | None, windows: list[tuple[int, int]] | None = None):
    """Non-overlapping rectilinear shells on a canvas of ``n_bins`` bins per side.

    ``capacity`` bounds the vertex total of the canvas, or of every
    ``preset.image_size`` window at ``windows`` origins when those are given.
    """
    bw = preset.image_size / preset.n_bins
    size = int(round(n_bins * bw))
    occupied = np.zeros((size, size), dtype=bool)
    shells: list[PolygonRing] = []
    total = 0
    load = np.zeros(len(windows or ()), dtype=np.int64)
    for _ in range(preset.max_attempts * max(1, target // preset.max_buildings)):
        if len(shells) >= target:
            break
        kind = preset.shapes[int(rng.integers(len(preset.shapes)))]
        w = int(rng.integers(preset.min_size, preset.max_size + 1))
        h = int(rng.integers(preset.min_size, preset.max_size + 1))
        lattice = _shape_lattice(kind, w, h, rng)
        if lattice is None:
            continue
        cut = rng.random() < preset.cut_prob
        if cut:
            ox = int(rng.integers(-(w // 2), n_bins - w // 2))
            oy = int(rng.integers(-(h // 2), n_bins - h // 2))
        else:
            span = n_bins - 1 - max(w, h)
            if span < 0:
                continue
            ox, oy = int(rng.integers(0, span + 1)), int(rng.integers(0, span + 1))
        pts = (lattice + [ox, oy] + 0.5) * bw
        pts = clip_ring_to_box(pts, 0.5 * bw, size - 0.5 * bw)
        if len(pts) < 3 or abs(signed_area(pts)) < (preset.min_size * bw) ** 2 / 4:
            continue
        if capacity is not None and not windows and total + len(pts) > capacity:
            continue
        if windows:
            extra = _window_counts(pts, windows, preset.image_size, bw)
            if extra is None or (capacity is not None and (load + extra > capacity).any()):
                continue
        ring = PolygonRing(pts)
        mask = rasterize(PolygonSet([ring]), size, size)
        grown = ndimage.binary_dilation(mask, iterations=preset.gap)
        if (grown & occupied).any():
            continue
        if windows:
            load += extra
        occupied |= mask
        shells.append(ring)
        total += len(ring)
    return shells, occupied, size


def _render_buildings(rng: np.random.Generator, shells: list[PolygonRing], size: int) -> np.ndarray:
    image = _texture(rng, size)
    for ring in shells:
        m = rasterize(PolygonSet([ring]), size, size)
        color = rng.uniform(0.55, 1.0, size=3)
        image[m] = np.clip(color + rng.normal(0.0, 0.02, (int(m.sum()), 3)), 0.0, 1.0)
    return _to_uint8_levels(image)


def _building_scene(rng: np.random.Generator, preset: ScenePreset):
    """A window cut from a canvas twice the scene size, the way training patches are cut from aerial tiles.

    Buildings are placed on the whole canvas at the preset's density; the
    vertex budget applies to the window, and rings crossing its border are
    clipped to the half-bin border.
    """
    n, size = preset.n_bins, preset.image_size
    bw = size / n
    ox, oy = (int(v) for v in rng.integers(0, n + 1, size=2))
    origin = (round(ox * bw), round(oy * bw))
    target = int(rng.integers(4 * preset.min_buildings, 4 * preset.max_buildings + 1))
    placed, occupied, _ = _place_buildings(rng, preset, 2 * n, target, preset.n_slots, [origin])
    canvas = _render_buildings(rng, placed, 2 * size)
    shells = []
    for ring in placed:
        pts = clip_ring_to_box(ring.vertices - origin, 0.5 * bw, size - 0.5 * bw)
        if len(pts) >= 3 and abs(signed_area(pts)) > 0:
            shells.append(PolygonRing(pts))
    if len(shells) < preset.min_buildings:
        return None
    window = (slice(origin[1], origin[1] + size), slice(origin[0], origin[0] + size))
    return PolygonSet(shells), canvas[window], occupied[window]


def generate_tile(seed: int, preset: ScenePreset, tile_size: int, overlap: float = 0.1) -> "LoadedScene":
    """A large building scene with the preset's shape statistics.

    The building count scales with area. Every patch of the ``overlap`` tiling
    holds at most ``preset.n_slots`` vertices after clipping, the same budget a
    single scene has, so each patch is within what a model for the preset can
    represent.
    """
    rng = make_rng(seed)
    bw = preset.image_size / preset.n_bins
    n_bins = int(round(tile_size / bw))
    area_ratio = (tile_size / preset.image_size) ** 2
    lo = max(1, int(round(preset.min_buildings * area_ratio)))
    hi = max(lo, int(round(preset.max_buildings * area_ratio)))
    target = int(rng.integers(lo, hi + 1))
    size = int(round(n_bins * bw))
    windows = tile_patches(size, size, preset.image_size, overlap).origins if size >= preset.image_size else None
    shells, _, size = _place_buildings(rng, preset, n_bins, target, preset.n_slots, windows)
    image = _render_buildings(rng, shells, size)
    return LoadedScene(f"{preset.name}-tile-{seed:06d}", image, PolygonSet(shells), size, size)


def _road_scene(rng: np.random.Generator, preset: ScenePreset):
    size = preset.image_size
    bw = size / preset.n_bins
    n_nodes = int(rng.integers(4, 8))
    pts: list[np.ndarray] = []
    for _ in range(preset.max_attempts):
        if len(pts) >= n_nodes:
            break
        cand = rng.integers(2, preset.n_bins - 2, size=2)
        if all(np.abs(cand - p).max() >= 8 for p in pts):
            pts.append(cand)
    if len(pts) < 3:
        return None
    nodes = (np.asarray(pts, dtype=np.float64) + 0.5) * bw
    try:
        tri = Delaunay(nodes)
    except Exception:  # collinear points
        return None
    cand_edges = sorted({tuple(sorted((int(s[a]), int(s[b]))))
                         for s in tri.simplices for a, b in ((0, 1), (1, 2), (0, 2))})
    order = rng.permutation(len(cand_edges))
    parent = list(range(len(nodes)))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    edges, extra = [], []
    for k in order:
        a, b = cand_edges[k]
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[ra] = rb
            edges.append((a, b))
        else:
            extra.append((a, b))
    for e in extra:
        if rng.random() < 0.3:
            edges.append(e)
    # respect slot capacity: two slots per edge
    edges = edges[: preset.n_slots // 2]
    used = sorted({i for e in edges for i in e})
    remap = {old: new for new, old in enumerate(used)}
    graph = RoadGraph(nodes[used], [(remap[a], remap[b]) for a, b in edges])
    image = np.empty((size, size, 3))
    image[:] = rng.uniform(0.15, 0.4, size=3)
    image = np.clip(image + rng.normal(0.0, 0.03, image.shape), 0.0, 1.0)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    centres = np.stack([xx.ravel(), yy.ravel()], axis=1)
    stroke = np.zeros(size * size, dtype=bool)
    width = float(rng.uniform(1.5, 3.0))
    for a, b in graph.edges:
        stroke |= point_segment_distance(centres, graph.nodes[a], graph.nodes[b]) <= width / 2
    stroke = stroke.reshape(size, size)
    image[stroke] = rng.uniform(0.7, 0.95)
    return graph, _to_uint8_levels(image), stroke


def attach_targets(sample_polys: PolygonSet | None, road: RoadGraph | None, preset: ScenePreset,
                   strict: bool = False, stats: Counter | None = None):
    grid, vocab = preset.grid, preset.vocab
    if road is not None:
        seq, inst, edge_slots = build_road_sequence(road, grid, vocab, preset.n_slots)
        road.instance_map = inst
        return seq, build_road_permutation(edge_slots, preset.n_slots)
    seq, slot_map = build_vertex_sequence(sample_polys, grid, vocab, preset.n_slots,
                                          strict=strict, stats=stats)
    return seq, build_gt_permutation(slot_map, seq.n_vertices, preset.n_slots)


def generate_scene(seed: int, preset: ScenePreset, stats: Counter | None = None,
                   max_reseeds: int = 100) -> SceneSample:
    """Deterministic scene for ``seed``; on rejection the next seed is tried."""
    stats = stats if stats is not None else Counter()
    for k in range(max_reseeds):
        rng = make_rng(seed + k)
        made = _road_scene(rng, preset) if preset.mode == "road" else _building_scene(rng, preset)
        if made is None:
            stats["reseeded"] += 1
            continue
        geom, image, footprint = made
        polys = None if preset.mode == "road" else geom
        road = geom if preset.mode == "road" else None
        seq, perm = attach_targets(polys, road, preset, strict=True)
        return SceneSample(image, polys, seq, perm, f"{preset.name}-{seed:06d}", road, footprint)
    raise RuntimeError(f"no valid scene within {max_reseeds} seeds from {seed}")


# -- augmentation ----------------------------------------------------------------

@dataclass(frozen=True)
class AugmentParams:
    transpose: bool = False
    flip_x: bool = False
    flip_y: bool = False
    brightness: float = 0.0
    contrast: float = 1.0
    noise_sigma: float = 0.0
    noise_seed: int = 0

    @property
    def geometric(self) -> bool:
        return self.transpose or self.flip_x or self.flip_y


def draw_augment(rng: np.random.Generator, p_geometric: float = 0.8) -> AugmentParams:
    geo = rng.random() < p_geometric
    t, fx, fy = (bool(v) for v in rng.integers(0, 2, size=3))
    return AugmentParams(
        transpose=geo and t, flip_x=geo and fx, flip_y=geo and fy,
        brightness=float(rng.uniform(-0.08, 0.08)), contrast=float(rng.uniform(0.85, 1.15)),
        noise_sigma=float(rng.uniform(0.0, 0.05)), noise_seed=int(rng.integers(2 ** 31)),
    )


def _transform_points(pts: np.ndarray, p: AugmentParams, w: float, h: float) -> np.ndarray:
    out = pts.copy()
    if p.transpose:
        out = out[:, ::-1].copy()
        w, h = h, w
    if p.flip_x:
        out[:, 0] = w - out[:, 0]
    if p.flip_y:
        out[:, 1] = h - out[:, 1]
    return out


def _transform_image(img: np.ndarray, p: AugmentParams) -> np.ndarray:
    out = img
    if p.transpose:
        out = out.transpose(1, 0, 2) if out.ndim == 3 else out.T
    if p.flip_x:
        out = out[:, ::-1]
    if p.flip_y:
        out = out[::-1]
    return np.ascontiguousarray(out)


def apply_augment(sample: SceneSample, p: AugmentParams, preset: ScenePreset) -> SceneSample:
    h, w = sample.image.shape[:2]
    image = _transform_image(sample.image, p)
    polys, road, footprint = sample.polygons, sample.road, sample.footprint
    if p.geometric:
        if polys is not None:
            polys = PolygonSet([PolygonRing(_transform_points(s.vertices, p, w, h)) for s in polys.shells],
                               {i: [PolygonRing(_transform_points(x.vertices, p, w, h)) for x in hs]
                                for i, hs in polys.holes.items()})
        if road is not None:
            road = RoadGraph(_transform_points(road.nodes, p, w, h), list(road.edges))
        if footprint is not None:
            footprint = _transform_image(footprint, p)
    if p.contrast != 1.0 or p.brightness != 0.0:
        image = (image - 0.5) * p.contrast + 0.5 + p.brightness
    if p.noise_sigma > 0:
        image = image + make_rng(p.noise_seed).normal(0.0, p.noise_sigma, image.shape)
    if image is not sample.image:
        image = np.clip(image, 0.0, 1.0)
    if p.geometric:
        seq, perm = attach_targets(polys, road, preset)
    else:
        seq, perm = sample.sequence, sample.permutation
    return replace(sample, image=image, polygons=polys, road=road, sequence=seq,
                   permutation=perm, footprint=footprint)


def augment(sample: SceneSample, seed: int, preset: ScenePreset) -> SceneSample:
    return apply_augment(sample, draw_augment(make_rng(seed)), preset)


# -- tiling ------------------------------------------------------------------------

@dataclass
class PatchGrid:
    tile_width: int
    tile_height: int
    patch_size: int
    overlap: float
    origins: list[tuple[int, int]] = field(default_factory=list)


def _axis_origins(extent: int, patch: int, stride: int) -> list[int]:
    if extent <= patch:
        return [0]
    out = list(range(0, extent - patch, stride))
    out.append(extent - patch)
    return out


def tile_patches(tile_width: int, tile_height: int, patch_size: int, overlap: float = 0.1) -> PatchGrid:
    if patch_size > tile_width or patch_size > tile_height:
        raise ValueError(f"patch {patch_size} larger than tile {tile_width}x{tile_height}")
    stride = max(1, int(math.floor(patch_size * (1.0 - overlap))))
    xs = _axis_origins(tile_width, patch_size, stride)
    ys = _axis_origins(tile_height, patch_size, stride)
    return PatchGrid(tile_width, tile_height, patch_size, overlap, [(x, y) for y in ys for x in xs])


# -- COCO persistence ---------------------------------------------------------------

class CocoFormatError(ValueError):
    pass


def _ring_to_flat(ring: PolygonRing) -> list[float]:
    return [float(c) for c in ring.vertices.reshape(-1)]


def polygons_to_annotations(polys: PolygonSet, image_id: int, start_id: int) -> list[dict]:
    """One annotation per polygon; ``segmentation[0]`` is the shell, the rest its holes."""
    anns = []
    for k, (shell, holes) in enumerate(polys.polygons()):
        v = shell.vertices
        x0, y0 = v.min(axis=0)
        x1, y1 = v.max(axis=0)
        anns.append({
            "id": start_id + k, "image_id": image_id, "category_id": 1, "iscrowd": 0,
            "segmentation": [_ring_to_flat(shell)] + [_ring_to_flat(h) for h in holes],
            "area": abs(shell.area) - sum(abs(h.area) for h in holes),
            "bbox": [float(x0), float(y0), float(x1 - x0), float(y1 - y0)],
        })
    return anns


def annotations_to_polygons(anns: list[dict], stats: Counter | None = None) -> PolygonSet:
    out = PolygonSet()
    for ann in sorted(anns, key=lambda a: a.get("id", 0)):
        seg = ann.get("segmentation")
        if not isinstance(seg, list):
            if stats is not None:
                stats["rle_skipped"] += 1
            log.warning("annotation %s: RLE segmentation skipped", ann.get("id"))
            continue
        rings = []
        for flat in seg:
            if len(flat) < 6 or len(flat) % 2:
                raise CocoFormatError(f"annotation {ann.get('id')}: malformed polygon of length {len(flat)}")
            rings.append(PolygonRing(np.asarray(flat, dtype=np.float64).reshape(-1, 2)))
        if not rings:
            continue
        out.shells.append(rings[0])
        if len(rings) > 1:
            out.holes[len(out.shells) - 1] = rings[1:]
    return out


def coco_document(samples, image_files: dict[str, str] | None = None) -> dict:
    images, annotations = [], []
    next_ann = 1
    for image_id, s in enumerate(samples, start=1):
        h, w = s.image.shape[:2] if s.image is not None else (s.height, s.width)
        entry = {"id": image_id, "file_name": (image_files or {}).get(s.scene_id, f"{s.scene_id}.png"),
                 "width": int(w), "height": int(h), "scene_id": s.scene_id}
        if s.road is not None:
            entry["road_graph"] = {"nodes": s.road.nodes.tolist(), "edges": [list(e) for e in s.road.edges]}
        images.append(entry)
        if s.polygons is not None:
            anns = polygons_to_annotations(s.polygons, image_id, next_ann)
            next_ann += len(anns)
            annotations.extend(anns)
    return {"images": images, "annotations": annotations,
            "categories": [{"id": 1, "name": "building"}]}


def save_png(path: str, image: np.ndarray) -> None:
    Image.fromarray(np.round(np.clip(image, 0, 1) * 255).astype(np.uint8), mode="RGB").save(path)


def load_png(path: str) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0


def write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def save_coco(samples, path: str, write_images: bool = True) -> None:
    """Write ``path`` (COCO JSON) plus one PNG per sample next to it."""
    root = os.path.dirname(os.path.abspath(path))
    os.makedirs(root, exist_ok=True)
    if write_images:
        for s in samples:
            save_png(os.path.join(root, f"{s.scene_id}.png"), s.image)
    write_json(path, coco_document(samples))


@dataclass(eq=False)
class LoadedScene:
    scene_id: str
    image: np.ndarray | None
    polygons: PolygonSet | None
    width: int
    height: int
    road: RoadGraph | None = None


def load_coco(path: str, load_images: bool = True, stats: Counter | None = None) -> list[LoadedScene]:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise CocoFormatError(f"{path}: malformed JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    root = os.path.dirname(os.path.abspath(path))
    images = {img["id"]: img for img in doc.get("images", [])}
    by_image: dict[int, list[dict]] = {i: [] for i in images}
    for ann in doc.get("annotations", []):
        if ann.get("image_id") not in images:
            raise CocoFormatError(f"annotation {ann.get('id')} references missing image id {ann.get('image_id')}")
        by_image[ann["image_id"]].append(ann)
    out = []
    for image_id in sorted(images):
        img = images[image_id]
        pixels = None
        if load_images:
            file = os.path.join(root, img["file_name"])
            if os.path.exists(file):
                pixels = load_png(file)
        road = None
        if "road_graph" in img:
            g = img["road_graph"]
            road = RoadGraph(np.asarray(g["nodes"], dtype=np.float64), [tuple(e) for e in g["edges"]])
        polys = annotations_to_polygons(by_image[image_id], stats) if road is None else None
        out.append(LoadedScene(img.get("scene_id", os.path.splitext(img["file_name"])[0]), pixels, polys,
                               int(img["width"]), int(img["height"]), road))
    return out


def scene_from_loaded(scene: LoadedScene, preset: ScenePreset, stats: Counter | None = None) -> SceneSample:
    """Rebuild training targets for a loaded scene (over-capacity rings dropped, counted)."""
    seq, perm = attach_targets(scene.polygons, scene.road, preset, strict=False, stats=stats)
    return SceneSample(scene.image, scene.polygons, seq, perm, scene.scene_id, scene.road)


# -- manifests ------------------------------------------------------------------------

@dataclass
class DatasetManifest:
    split: str
    sample_ids: list[str]
    seed: int
    preset: ScenePreset
    seeds: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"split": self.split, "sample_ids": self.sample_ids, "seed": self.seed,
                "seeds": self.seeds, "preset": self.preset.to_dict(), "prng": "PCG64"}

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        return cls(d["split"], list(d["sample_ids"]), int(d["seed"]),
                   ScenePreset.from_dict(d["preset"]), list(d.get("seeds", [])))


def generate_dataset(preset: ScenePreset, seed: int, count: int, split: str = "train",
                     stats: Counter | None = None) -> tuple[list[SceneSample], DatasetManifest]:
    """``count`` scenes from consecutive seed blocks; ids are unique by construction."""
    samples, seeds = [], []
    block = 1000
    for i in range(count):
        s = seed * 1_000_003 + i * block
        samples.append(generate_scene(s, preset, stats))
        seeds.append(s)
    ids = [x.scene_id for x in samples]
    if len(set(ids)) != len(ids):
        raise RuntimeError("duplicate scene ids")
    return samples, DatasetManifest(split, ids, seed, preset, seeds)


def save_dataset(samples, manifest: DatasetManifest, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    save_coco(samples, os.path.join(out_dir, "annotations.json"))
    write_json(os.path.join(out_dir, "manifest.json"), manifest.to_dict())


def load_dataset(out_dir: str) -> tuple[list[SceneSample], DatasetManifest]:
    with open(os.path.join(out_dir, "manifest.json")) as fh:
        manifest = DatasetManifest.from_dict(json.load(fh))
    scenes = load_coco(os.path.join(out_dir, "annotations.json"))
    return [scene_from_loaded(s, manifest.preset) for s in scenes], manifest
