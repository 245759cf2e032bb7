import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from polyseq.graph import PolygonRing, PolygonSet
from polyseq.metrics import (MetricsReport, aggregate, buffered_boundary, c_iou_and_nratio, evaluate_scene,
                             match_polygons, mta, polis, polis_pair, polygon_iou, raster_iou, rasterize,
                             topo_mask_metrics, write_reports)


def box(x0, y0, x1, y1):
    return PolygonRing([(x0, y0), (x1, y0), (x1, y1), (x0, y1)])


def one(ring):
    return PolygonSet([ring])


def rotated_square(cx, cy, half, deg):
    t = np.radians(deg)
    corners = np.array([(-half, -half), (half, -half), (half, half), (-half, half)])
    rot = np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]])
    return PolygonRing(corners @ rot.T + [cx, cy])


def dense_boundary(ring, n=4000):
    a = ring.vertices
    b = np.roll(a, -1, axis=0)
    t = np.linspace(0, 1, n, endpoint=False)[:, None]
    return np.concatenate([p + t * (q - p) for p, q in zip(a, b)])


def polis_oracle(a, b):
    """Vertex-to-boundary distances taken against a densely sampled boundary."""
    db = dense_boundary(b)
    da = dense_boundary(a)
    d1 = np.sqrt(((a.vertices[:, None] - db[None]) ** 2).sum(-1)).min(1).mean()
    d2 = np.sqrt(((b.vertices[:, None] - da[None]) ** 2).sum(-1)).min(1).mean()
    return 0.5 * d1 + 0.5 * d2


def test_square_raster_count():
    assert rasterize(one(box(1, 1, 4, 4)), 6, 6).sum() == 9


def test_empty_raster():
    assert not rasterize(PolygonSet(), 5, 5).any()


def test_annulus():
    polys = PolygonSet([box(0, 0, 10, 10)], {0: [box(3, 3, 7, 7)]})
    m = rasterize(polys, 10, 10)
    assert not m[5, 5] and m[1, 1]
    # the 4x4 block of centres strictly inside the hole is removed
    assert m.sum() == 100 - 16


def test_raster_iou_examples():
    a = rasterize(one(box(0, 0, 4, 4)), 10, 10)
    b = rasterize(one(box(5, 5, 9, 9)), 10, 10)
    assert raster_iou(a, a) == (1.0, 1.0)
    assert raster_iou(a, b)[0] == 0.0
    empty = np.zeros((3, 3), bool)
    assert raster_iou(empty, empty)[0] == 1.0
    with pytest.raises(ValueError):
        raster_iou(a, np.zeros((4, 4), bool))


def test_half_offset_unit_squares_iou_one_third():
    scale = 512
    a = rasterize(one(box(0, 0, 1, 1)), 2 * scale, scale, scale=scale)
    b = rasterize(one(box(0.5, 0, 1.5, 1)), 2 * scale, scale, scale=scale)
    assert raster_iou(a, b)[0] == pytest.approx(1 / 3, abs=0.01)


def test_polis_square_shift_matches_oracle():
    a, b = box(0, 0, 1, 1), box(0.1, 0, 1.1, 1)
    assert polis_pair(a, b) == pytest.approx(0.05, abs=1e-12)
    assert polis_oracle(a, b) == pytest.approx(0.05, abs=1e-3)


@settings(max_examples=30, deadline=None)
@given(st.floats(-2, 2), st.floats(-2, 2), st.floats(5, 20), st.floats(0, 90))
def test_polis_agrees_with_dense_oracle(dx, dy, size, deg):
    a = box(10, 10, 10 + size, 10 + size)
    b = rotated_square(10 + size / 2 + dx, 10 + size / 2 + dy, size / 2, deg)
    assert polis_pair(a, b) == pytest.approx(polis_oracle(a, b), abs=size * 2e-3)
    assert polis_pair(a, b) == pytest.approx(polis_pair(b, a), abs=1e-12)


def test_polis_identical_and_unmatched():
    sq = one(box(2, 2, 9, 9))
    assert polis(sq, sq) == 0.0
    assert polis(sq, one(box(20, 20, 25, 25))) is None


def test_mta_examples():
    sq = box(10, 10, 30, 30)
    assert mta(one(sq), one(sq)) == pytest.approx(0.0, abs=1e-9)
    assert mta(one(rotated_square(20, 20, 10, 45)), one(sq)) == pytest.approx(45.0, abs=0.5)
    assert mta(one(sq.oriented(False)), one(sq)) == pytest.approx(0.0, abs=1e-9)


def test_c_iou_examples():
    sq = box(0, 0, 4, 4)
    octagon = PolygonRing([(0, 0), (2, 0), (4, 0), (4, 2), (4, 4), (2, 4), (0, 4), (0, 2)])
    m = rasterize(one(sq), 6, 6)
    c, nr = c_iou_and_nratio(one(octagon), one(sq), m, m)
    assert c == 2 / 3 and nr == 2.0
    assert c_iou_and_nratio(PolygonSet(), PolygonSet(), m, m) == (None, None)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_c_iou_never_exceeds_iou(seed):
    rng = np.random.default_rng(seed)
    x0, y0 = rng.uniform(0, 10, 2)
    a = box(x0, y0, x0 + rng.uniform(2, 10), y0 + rng.uniform(2, 10))
    b = box(5, 5, 12, 12)
    ma, mb = rasterize(one(a), 24, 24), rasterize(one(b), 24, 24)
    c, _ = c_iou_and_nratio(one(a), one(b), ma, mb)
    assert c <= raster_iou(ma, mb)[0]


def test_n_ratio_reciprocal():
    a, b = one(box(0, 0, 4, 4)), PolygonSet([box(0, 0, 4, 4), box(6, 6, 8, 8)])
    m1, m2 = rasterize(a, 10, 10), rasterize(b, 10, 10)
    assert c_iou_and_nratio(a, b, m1, m2)[1] == pytest.approx(1 / c_iou_and_nratio(b, a, m2, m1)[1])


def test_topo_examples():
    sq = one(box(10, 10, 30, 30))
    perfect = topo_mask_metrics(sq, sq, 40, 40)
    assert all(v == 1.0 for v in perfect.values())
    empty = topo_mask_metrics(PolygonSet(), sq, 40, 40)
    assert empty["iou_topo"] == 0.0
    assert empty["pa_mask"] == pytest.approx(1 - rasterize(sq, 40, 40).mean())
    near = topo_mask_metrics(one(box(11, 10, 31, 30)), sq, 40, 40)["iou_topo"]
    far = topo_mask_metrics(one(box(20, 10, 40, 30)), sq, 40, 40)["iou_topo"]
    assert near > far


def test_boundary_band_thickness():
    band = buffered_boundary(one(box(10.5, 10.5, 30.5, 30.5)), 40, 40)
    # the straight left edge is five pixels thick
    assert band[20, :].nonzero()[0][:5].tolist() == [8, 9, 10, 11, 12]


def test_match_is_greedy_one_to_one():
    gt = PolygonSet([box(0, 0, 10, 10), box(20, 0, 30, 10)])
    pred = PolygonSet([box(1, 0, 11, 10), box(0, 0, 10, 10), box(20, 0, 30, 10)])
    pairs = match_polygons(pred, gt)
    assert [(i, j) for i, j, _ in pairs] == [(1, 0), (2, 1)]


def test_polygon_iou_disjoint_and_identical():
    a = (box(0, 0, 2, 2), [])
    assert polygon_iou(a, a) == 1.0
    assert polygon_iou(a, (box(5, 5, 6, 6), [])) == 0.0


def test_self_evaluation_is_perfect():
    scene = PolygonSet([box(2.5, 2.5, 20.5, 12.5), PolygonRing([(30.5, 30.5), (50.5, 30.5), (50.5, 40.5),
                                                               (40.5, 40.5), (40.5, 55.5), (30.5, 55.5)])])
    rep, _ = evaluate_scene(scene, scene, 64, 64, "s")
    assert rep.iou == rep.accuracy == rep.c_iou == rep.n_ratio == 1.0
    assert rep.polis == 0.0 and rep.mta_degrees == pytest.approx(0.0, abs=1e-9)
    for name in ("iou_topo", "f1_topo", "pa_topo", "iou_mask", "f1_mask", "pa_mask"):
        assert getattr(rep, name) == 1.0


@settings(max_examples=20, deadline=None)
@given(st.integers(-5, 5), st.integers(-5, 5), st.integers(0, 1000))
def test_translation_invariance(dx, dy, seed):
    rng = np.random.default_rng(seed)
    gt = one(box(10.5, 10.5, 30.5, 25.5))
    x0, y0 = rng.integers(8, 14, 2) + 0.5
    pred = one(box(x0, y0, x0 + 20, y0 + 14))
    a, _ = evaluate_scene(pred, gt, 64, 64, "a")
    b, _ = evaluate_scene(pred.translated(dx, dy), gt.translated(dx, dy), 64, 64, "b")
    da, db = a.to_dict(), b.to_dict()
    for k in ("iou", "accuracy", "c_iou", "n_ratio", "polis", "mta_degrees", "iou_topo", "f1_topo", "iou_mask"):
        assert da[k] == pytest.approx(db[k], abs=1e-9), k


def test_empty_prediction_scores_zero():
    rep, _ = evaluate_scene(PolygonSet(), one(box(5, 5, 10, 10)), 16, 16, "e")
    assert rep.iou == 0.0 and rep.polis is None and rep.unmatched_gt == 1


def test_aggregate_pools_pixels_and_writes(tmp_path):
    sq = one(box(5, 5, 10, 10))
    r1, c1 = evaluate_scene(sq, sq, 16, 16, "a")
    r2, c2 = evaluate_scene(PolygonSet(), sq, 16, 16, "b")
    summary = aggregate([r1, r2], [c1, c2])
    assert summary.iou == pytest.approx(0.5)
    write_reports([r1, r2], summary, tmp_path / "m.json", tmp_path / "m.csv")
    doc = json.loads((tmp_path / "m.json").read_text())
    assert len(doc["scenes"]) == 2
    rows = list(csv.DictReader(open(tmp_path / "m.csv")))
    assert [r["scene_id"] for r in rows][:2] == ["a", "b"]
    assert set(MetricsReport.columns()) <= set(rows[0])
