from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from polyseq.graph import PolygonRing, PolygonSet
from polyseq.tokenizer import (QuantizationGrid, TokenSequence, Vocabulary, build_vertex_sequence,
                               canonical_ring, canonical_rings, dequantize_token, fit_to_capacity,
                               quantize, quantize_vertex, sequence_to_vertices)

G224 = QuantizationGrid(224, 224, 224)
V224 = Vocabulary(224)


def square(x0, y0, s):
    return PolygonRing([(x0, y0), (x0 + s, y0), (x0 + s, y0 + s), (x0, y0 + s)])


def test_vocabulary_layout():
    v = Vocabulary(64)
    assert (v.bos_id, v.eos_id, v.pad_id, v.vocab_size) == (64, 65, 66, 67)
    assert v.is_coord(63) and not v.is_coord(64)


@pytest.mark.parametrize("bad", [dict(image_width=64, image_height=64, n_bins=1),
                                 dict(image_width=0, image_height=64, n_bins=8)])
def test_grid_validation(bad):
    with pytest.raises(ValueError):
        QuantizationGrid(**bad)


@pytest.mark.parametrize("v, expected", [((0.0, 0.0), (0, 0)), ((10.7, 5.2), (10, 5)), ((223.999, 0), (223, 0))])
def test_quantize_examples(v, expected):
    assert quantize_vertex(v, G224) == expected


def test_quantize_clamps_and_counts():
    stats = Counter()
    assert quantize_vertex((-3.0, 224.0), G224, stats) == (0, 223)
    assert stats["clamped_coords"] == 2


def test_dequantize_examples():
    assert dequantize_token(0, 0, G224) == (0.5, 0.5)
    assert dequantize_token(*quantize_vertex((10.7, 5.2), G224), G224) == (10.5, 5.5)
    assert dequantize_token(31, 0, QuantizationGrid(64, 64, 32))[0] == 63.0


def test_dequantize_rejects_special_tokens():
    with pytest.raises(ValueError):
        dequantize_token(V224.eos_id, 0, G224)


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 223.999999), st.floats(0, 159.999999), st.sampled_from([16, 64, 224, 300]))
def test_round_trip_within_half_bin(x, y, bins):
    grid = QuantizationGrid(224, 160, bins)
    rx, ry = dequantize_token(*quantize_vertex((x, y), grid), grid)
    assert abs(rx - x) <= 0.5 * 224 / bins + 1e-9
    assert abs(ry - y) <= 0.5 * 160 / bins + 1e-9


def test_vectorized_quantize_matches_scalar():
    pts = np.random.default_rng(0).uniform(0, 224, size=(500, 2))
    vec = quantize(pts, G224)
    assert all(tuple(vec[i]) == quantize_vertex(pts[i], G224) for i in range(len(pts)))


def test_empty_scene_sequence():
    seq, slots = build_vertex_sequence(PolygonSet(), G224, V224, 4)
    assert list(seq.tokens) == [V224.bos_id, V224.eos_id] + [V224.pad_id] * 8
    assert seq.n_vertices == 0 and slots == []


def test_single_square_framing():
    seq, _ = build_vertex_sequence(PolygonSet([square(10, 20, 5)]), G224, V224, 8)
    assert seq.length == 18 and seq.logit_len == 17
    assert seq.tokens[0] == V224.bos_id and seq.tokens[9] == V224.eos_id
    assert list(seq.tokens[10:]) == [V224.pad_id] * 8
    assert list(seq.tokens[1:9]) == [10, 20, 15, 20, 15, 25, 10, 25]


def test_canonical_ring_is_clockwise_from_top_left():
    ccw = PolygonRing([(0, 10), (10, 10), (10, 0), (0, 0)][::-1])
    ring = canonical_ring(PolygonRing([(10, 10), (0, 10), (0, 0), (10, 0)]))
    assert ring.clockwise
    assert tuple(ring.vertices[0]) == (0, 0)
    assert canonical_ring(ccw).same_cycle(ring)


def test_rings_ordered_by_top_left_vertex():
    a, b = square(50, 5, 4), square(5, 30, 4)
    seq, slots = build_vertex_sequence(PolygonSet([b, a]), G224, V224, 8)
    assert list(seq.tokens[1:3]) == [50, 5]
    assert slots[:4] == [(0, 0), (0, 1), (0, 2), (0, 3)] and slots[4] == (1, 0)


@settings(max_examples=50, deadline=None)
@given(st.permutations(range(4)), st.integers(0, 1000))
def test_canonical_order_independent_of_input_order(order, seed):
    rng = np.random.default_rng(seed)
    rings = [square(float(x), float(y), 3) for x, y in rng.integers(0, 200, size=(4, 2))]
    a, _ = build_vertex_sequence(PolygonSet(rings), G224, V224, 16)
    b, _ = build_vertex_sequence(PolygonSet([rings[i] for i in order]), G224, V224, 16)
    np.testing.assert_array_equal(a.tokens, b.tokens)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 6), st.integers(0, 10_000))
def test_framing_has_single_bos_and_eos(n_rings, seed):
    rng = np.random.default_rng(seed)
    rings = [square(float(x), float(y), 2) for x, y in rng.integers(0, 200, size=(n_rings, 2))]
    seq, _ = build_vertex_sequence(PolygonSet(rings), G224, V224, 24)
    t = list(seq.tokens)
    assert len(t) == 50 and t.count(V224.bos_id) == 1 and t.count(V224.eos_id) == 1
    eos = t.index(V224.eos_id)
    assert all(x == V224.pad_id for x in t[eos + 1:])


def test_over_capacity_strict_rejects():
    rings = PolygonSet([square(0, 0, 3), square(10, 10, 3)])
    with pytest.raises(ValueError):
        build_vertex_sequence(rings, G224, V224, 6, strict=True)


def test_over_capacity_drops_smallest_first():
    big, small = square(0, 0, 30), square(100, 100, 3)
    stats = Counter()
    seq, slots = build_vertex_sequence(PolygonSet([small, big]), G224, V224, 6, stats=stats)
    assert seq.n_vertices == 4 and stats["dropped_rings"] == 1
    assert list(seq.tokens[1:3]) == [0, 0]
    assert fit_to_capacity([big], 6) == [big]


def test_holes_are_counted_not_encoded():
    stats = Counter()
    polys = PolygonSet([square(0, 0, 30)], {0: [square(10, 10, 5)]})
    seq, _ = build_vertex_sequence(polys, G224, V224, 16, stats=stats)
    assert seq.n_vertices == 4 and stats["holes_not_encoded"] == 1


def test_sequence_to_vertices_examples():
    bos, eos, pad = V224.bos_id, V224.eos_id, V224.pad_id
    assert sequence_to_vertices([bos, eos, pad], G224, V224) == []
    assert sequence_to_vertices([bos, 10, 5, eos, pad], G224, V224) == [(10.5, 5.5)]
    stats = Counter()
    assert sequence_to_vertices([bos, 10, 5, 7, eos], G224, V224, stats) == [(10.5, 5.5)]
    assert stats["dangling_tokens"] == 1


def test_sequence_to_vertices_skips_stray_specials():
    stats = Counter()
    out = sequence_to_vertices(TokenSequence(np.array([V224.bos_id, 1, V224.pad_id, 2, V224.eos_id]), 1),
                               G224, V224, stats)
    assert out == [(1.5, 2.5)] and stats["stray_special_tokens"] == 1


def test_canonical_rings_sorted():
    rings = canonical_rings(PolygonSet([square(5, 9, 2), square(7, 3, 2), square(1, 3, 2)]))
    assert [tuple(r.vertices[0]) for r in rings] == [(1, 3), (7, 3), (5, 9)]
