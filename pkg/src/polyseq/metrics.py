"""Polygon quality metrics: raster IoU/accuracy, C-IoU, N-ratio, PoLiS, MTA,
and buffered mask/boundary (topology) scores."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy import ndimage

from .graph import PolygonRing, PolygonSet, point_segment_distance

log = logging.getLogger(__name__)

MATCH_IOU = 0.5
MTA_SPACING = 0.1
BOUNDARY_THICKNESS = 5


# -- rasterization ---------------------------------------------------------

def _ring_crossings(pts: np.ndarray, height: int, width: int) -> np.ndarray:
    """Crossing counts per (row, cut) for even-odd fill at pixel centres.

    A pixel centre ``cx`` is interior when an odd number of edge crossings lie
    strictly to its right. Centres exactly on an edge are handled separately.
    """
    counts = np.zeros((height, width + 1), dtype=np.int64)
    x0, y0 = pts[:, 0], pts[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    yc = np.arange(height) + 0.5
    spans = (y0[:, None] <= yc[None, :]) != (y1[:, None] <= yc[None, :])
    e, r = np.nonzero(spans)
    if len(e) == 0:
        return counts
    t = (yc[r] - y0[e]) / (y1[e] - y0[e])
    xc = x0[e] + t * (x1[e] - x0[e])
    k = np.clip(np.ceil(xc - 0.5), 0, width).astype(np.int64)
    np.add.at(counts, (r, k), 1)
    return counts


_ON_EDGE_TOL = 1e-9


def _mark_ring_boundary(mask: np.ndarray, pts: np.ndarray) -> None:
    """Set pixels whose centres lie exactly on a ring edge."""
    height, width = mask.shape
    for (x0, y0), (x1, y1) in zip(pts, np.roll(pts, -1, axis=0)):
        lo, hi = min(y0, y1), max(y0, y1)
        r0 = max(0, int(math.ceil(lo - 0.5)))
        r1 = min(height - 1, int(math.floor(hi - 0.5)))
        if r1 < r0:
            continue
        if y0 == y1:
            c0 = max(0, int(math.ceil(min(x0, x1) - 0.5)))
            c1 = min(width - 1, int(math.floor(max(x0, x1) - 0.5)))
            if c1 >= c0:
                mask[r0:r1 + 1, c0:c1 + 1] = True
            continue
        rows = np.arange(r0, r1 + 1)
        xc = x0 + (rows + 0.5 - y0) * (x1 - x0) / (y1 - y0)
        col = np.round(xc - 0.5)
        hit = (np.abs(xc - 0.5 - col) < _ON_EDGE_TOL) & (col >= 0) & (col < width)
        mask[rows[hit], col[hit].astype(int)] = True


def rasterize_polygon(shell: PolygonRing, holes, width: int, height: int,
                      scale: float = 1.0, offset=(0.0, 0.0)) -> np.ndarray:
    """Pixels whose centres lie in the closed polygon (boundary counts as inside)."""
    counts = np.zeros((height, width + 1), dtype=np.int64)
    shift = np.asarray(offset, dtype=np.float64)
    rings = [(ring.vertices - shift) * scale for ring in [shell, *holes]]
    for pts in rings:
        counts += _ring_crossings(pts, height, width)
    right = np.cumsum(counts[:, ::-1], axis=1)[:, ::-1]
    mask = (right[:, 1:] % 2).astype(bool)
    for pts in rings:
        _mark_ring_boundary(mask, pts)
    return mask


def rasterize(polys: PolygonSet, width: int, height: int, scale: float = 1.0) -> np.ndarray:
    """Union of per-polygon even-odd fills (holes subtract within their own polygon).

    Each polygon is treated as a closed set, so the result commutes exactly
    with flips and transposes of the frame.
    """
    mask = np.zeros((height, width), dtype=bool)
    for shell, holes in polys.polygons():
        mask |= rasterize_polygon(shell, holes, width, height, scale)
    return mask


def rasterize_boundaries(polys: PolygonSet, width: int, height: int, step: float = 0.25) -> np.ndarray:
    """1-px traced outline: every pixel touched by a densely sampled ring edge."""
    mask = np.zeros((height, width), dtype=bool)
    rings = list(polys.shells) + [h for hs in polys.holes.values() for h in hs]
    for ring in rings:
        a = ring.vertices
        b = np.roll(a, -1, axis=0)
        for p, q in zip(a, b):
            n = max(2, int(math.ceil(np.hypot(*(q - p)) / step)) + 1)
            t = np.linspace(0.0, 1.0, n)[:, None]
            s = p + t * (q - p)
            c = np.clip(np.floor(s[:, 0]).astype(int), 0, width - 1)
            r = np.clip(np.floor(s[:, 1]).astype(int), 0, height - 1)
            mask[r, c] = True
    return mask


# -- pixel metrics -----------------------------------------------------------

def _check_same(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"mask size mismatch: {a.shape} vs {b.shape}")


def raster_iou(pred: np.ndarray, gt: np.ndarray) -> tuple[float, float]:
    _check_same(pred, gt)
    inter = np.count_nonzero(pred & gt)
    union = np.count_nonzero(pred | gt)
    iou = 1.0 if union == 0 else inter / union
    acc = float(np.count_nonzero(pred == gt)) / pred.size
    return iou, acc


def pixel_scores(pred: np.ndarray, gt: np.ndarray) -> tuple[float, float, float]:
    """(iou, f1, pixel accuracy) on the positive class."""
    _check_same(pred, gt)
    tp = np.count_nonzero(pred & gt)
    fp = np.count_nonzero(pred & ~gt)
    fn = np.count_nonzero(~pred & gt)
    pa = float(np.count_nonzero(pred == gt)) / pred.size
    if tp + fp + fn == 0:
        return 1.0, 1.0, pa
    iou = tp / (tp + fp + fn)
    f1 = 2 * tp / (2 * tp + fp + fn)
    return iou, f1, pa


def buffered_boundary(polys: PolygonSet, width: int, height: int,
                      thickness: int = BOUNDARY_THICKNESS) -> np.ndarray:
    line = rasterize_boundaries(polys, width, height)
    radius = (thickness - 1) // 2
    if radius <= 0 or not line.any():
        return line
    return ndimage.binary_dilation(line, structure=np.ones((3, 3), bool), iterations=radius)


def topo_mask_metrics(pred: PolygonSet, gt: PolygonSet, width: int, height: int,
                      thickness: int = BOUNDARY_THICKNESS) -> dict:
    pm, gm = rasterize(pred, width, height), rasterize(gt, width, height)
    pb = buffered_boundary(pred, width, height, thickness)
    gb = buffered_boundary(gt, width, height, thickness)
    iou_topo, f1_topo, pa_topo = pixel_scores(pb, gb)
    iou_mask, f1_mask, pa_mask = pixel_scores(pm, gm)
    return {"iou_topo": iou_topo, "f1_topo": f1_topo, "pa_topo": pa_topo,
            "iou_mask": iou_mask, "f1_mask": f1_mask, "pa_mask": pa_mask}


def c_iou_and_nratio(pred: PolygonSet, gt: PolygonSet, pred_mask: np.ndarray,
                     gt_mask: np.ndarray) -> tuple[float | None, float | None]:
    """Complexity-aware IoU and vertex-count ratio; ``None`` when undefined."""
    n_pred, n_gt = pred.n_vertices, gt.n_vertices
    if n_pred + n_gt == 0:
        return None, None
    iou, _ = raster_iou(pred_mask, gt_mask)
    # 1 - |a - b| / (a + b) written as 2 min(a, b) / (a + b): one rounding instead of two
    c_iou = iou * (2 * min(n_pred, n_gt) / (n_pred + n_gt))
    n_ratio = n_pred / n_gt if n_gt else None
    return c_iou, n_ratio


# -- instance matching ----------------------------------------------------------

def _bbox(ring: PolygonRing) -> np.ndarray:
    v = ring.vertices
    return np.concatenate([v.min(axis=0), v.max(axis=0)])


def polygon_iou(a: tuple, b: tuple, min_pixels: int = 128) -> float:
    """IoU of two ``(shell, holes)`` polygons, rasterized over their joint bbox."""
    ba, bb = _bbox(a[0]), _bbox(b[0])
    if ba[2] <= bb[0] or bb[2] <= ba[0] or ba[3] <= bb[1] or bb[3] <= ba[1]:
        return 0.0
    lo = np.minimum(ba[:2], bb[:2])
    hi = np.maximum(ba[2:], bb[2:])
    extent = float(max(hi - lo))
    scale = max(1.0, min_pixels / extent)
    w = int(math.ceil((hi[0] - lo[0]) * scale)) + 1
    h = int(math.ceil((hi[1] - lo[1]) * scale)) + 1
    ma = rasterize_polygon(a[0], a[1], w, h, scale, lo)
    mb = rasterize_polygon(b[0], b[1], w, h, scale, lo)
    return raster_iou(ma, mb)[0]


def match_polygons(pred: PolygonSet, gt: PolygonSet, threshold: float = MATCH_IOU):
    """Greedy highest-IoU-first one-to-one pairing above ``threshold``."""
    P, G = list(pred.polygons()), list(gt.polygons())
    cands = []
    for i, p in enumerate(P):
        for j, g in enumerate(G):
            iou = polygon_iou(p, g)
            if iou > threshold:
                cands.append((-iou, i, j))
    cands.sort()
    used_p, used_g, pairs = set(), set(), []
    for neg, i, j in cands:
        if i in used_p or j in used_g:
            continue
        used_p.add(i)
        used_g.add(j)
        pairs.append((i, j, -neg))
    return sorted(pairs)


# -- PoLiS ---------------------------------------------------------------------

def _vertex_to_boundary(points: np.ndarray, ring: PolygonRing) -> np.ndarray:
    a = ring.vertices
    b = np.roll(a, -1, axis=0)
    d = np.stack([point_segment_distance(points, p, q) for p, q in zip(a, b)], axis=1)
    return d.min(axis=1)


def polis_pair(a: PolygonRing, b: PolygonRing) -> float:
    da = _vertex_to_boundary(a.vertices, b)
    db = _vertex_to_boundary(b.vertices, a)
    return 0.5 * da.mean() + 0.5 * db.mean()


def polis(pred: PolygonSet, gt: PolygonSet, pairs=None) -> float | None:
    pairs = match_polygons(pred, gt) if pairs is None else pairs
    if not pairs:
        return None
    return float(np.mean([polis_pair(pred.shells[i], gt.shells[j]) for i, j, _ in pairs]))


# -- max tangent angle -----------------------------------------------------------

def sample_contour(ring: PolygonRing, spacing: float = MTA_SPACING):
    """Points at uniform arc length (offset half a step from the start) and their edge angles."""
    a = ring.vertices
    b = np.roll(a, -1, axis=0)
    seg = b - a
    lengths = np.hypot(seg[:, 0], seg[:, 1])
    total = lengths.sum()
    if total <= 0:
        return np.zeros((0, 2)), np.zeros(0)
    n = max(1, int(math.floor(total / spacing)))
    s = (np.arange(n) + 0.5) * (total / n)
    cum = np.concatenate([[0.0], np.cumsum(lengths)])
    idx = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(a) - 1)
    t = (s - cum[idx]) / np.where(lengths[idx] > 0, lengths[idx], 1.0)
    pts = a[idx] + t[:, None] * seg[idx]
    angles = np.degrees(np.arctan2(seg[idx, 1], seg[idx, 0]))
    return pts, angles


def _fold(delta: np.ndarray) -> np.ndarray:
    d = np.mod(np.abs(delta), 180.0)
    return np.minimum(d, 180.0 - d)


def max_tangent_angle(pred: PolygonRing, gt: PolygonRing, spacing: float = MTA_SPACING) -> float | None:
    pts, ang = sample_contour(pred, spacing)
    if len(pts) == 0:
        return None
    a = gt.vertices
    b = np.roll(a, -1, axis=0)
    seg = b - a
    keep = np.hypot(seg[:, 0], seg[:, 1]) > 0
    if not keep.any():
        return None
    a, b, seg = a[keep], b[keep], seg[keep]
    d = np.stack([point_segment_distance(pts, p, q) for p, q in zip(a, b)], axis=1)
    nearest = d.argmin(axis=1)
    gt_ang = np.degrees(np.arctan2(seg[nearest, 1], seg[nearest, 0]))
    return float(_fold(ang - gt_ang).max())


def mta(pred: PolygonSet, gt: PolygonSet, pairs=None, spacing: float = MTA_SPACING) -> float | None:
    pairs = match_polygons(pred, gt) if pairs is None else pairs
    vals = []
    for i, j, _ in pairs:
        v = max_tangent_angle(pred.shells[i], gt.shells[j], spacing)
        if v is None:
            log.warning("degenerate contour in pair (%d, %d); skipped", i, j)
            continue
        vals.append(v)
    return float(np.mean(vals)) if vals else None


# -- report ---------------------------------------------------------------------

@dataclass
class MetricsReport:
    scene_id: str = ""
    iou: float | None = None
    accuracy: float | None = None
    c_iou: float | None = None
    n_ratio: float | None = None
    mta_degrees: float | None = None
    polis: float | None = None
    iou_topo: float | None = None
    f1_topo: float | None = None
    pa_topo: float | None = None
    f1_mask: float | None = None
    pa_mask: float | None = None
    iou_mask: float | None = None
    n_pred: int = 0
    n_gt: int = 0
    matched: int = 0
    unmatched_pred: int = 0
    unmatched_gt: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls)]


def evaluate_scene(pred: PolygonSet, gt: PolygonSet, width: int, height: int,
                   scene_id: str = "") -> tuple[MetricsReport, dict]:
    """Full metric suite for one scene; second value carries pooled pixel counts."""
    pm, gm = rasterize(pred, width, height), rasterize(gt, width, height)
    iou, acc = raster_iou(pm, gm)
    c_iou, n_ratio = c_iou_and_nratio(pred, gt, pm, gm)
    pairs = match_polygons(pred, gt)
    topo = topo_mask_metrics(pred, gt, width, height)
    rep = MetricsReport(
        scene_id=scene_id, iou=iou, accuracy=acc, c_iou=c_iou, n_ratio=n_ratio,
        mta_degrees=mta(pred, gt, pairs), polis=polis(pred, gt, pairs),
        n_pred=len(pred), n_gt=len(gt), matched=len(pairs),
        unmatched_pred=len(pred) - len(pairs), unmatched_gt=len(gt) - len(pairs), **topo,
    )
    counts = {"inter": int(np.count_nonzero(pm & gm)), "union": int(np.count_nonzero(pm | gm)),
              "agree": int(np.count_nonzero(pm == gm)), "pixels": int(pm.size)}
    return rep, counts


def aggregate(reports: list[MetricsReport], counts: list[dict]) -> MetricsReport:
    """Mean over scenes; IoU and accuracy pooled over pixel counts."""
    out = MetricsReport(scene_id="__all__")
    for name in MetricsReport.columns():
        if name == "scene_id":
            continue
        vals = [getattr(r, name) for r in reports if getattr(r, name) is not None]
        if name in ("n_pred", "n_gt", "matched", "unmatched_pred", "unmatched_gt"):
            setattr(out, name, int(sum(vals)))
        elif vals:
            setattr(out, name, float(np.mean(vals)))
    inter = sum(c["inter"] for c in counts)
    union = sum(c["union"] for c in counts)
    pixels = sum(c["pixels"] for c in counts)
    if counts:
        out.iou = 1.0 if union == 0 else inter / union
        out.accuracy = sum(c["agree"] for c in counts) / pixels
    return out


def write_reports(reports: list[MetricsReport], summary: MetricsReport, json_path, csv_path) -> None:
    with open(json_path, "w") as fh:
        json.dump({"summary": summary.to_dict(), "scenes": [r.to_dict() for r in reports]},
                  fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(csv_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=MetricsReport.columns())
        w.writeheader()
        for r in [*reports, summary]:
            w.writerow({k: ("" if v is None else v) for k, v in r.to_dict().items()})
