import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lace.layout import (
    EDGE_JACOBIAN,
    Element,
    InvalidLabelError,
    Layout,
    LayoutError,
    StateVector,
    box_to_edges,
    boxes_to_edges,
    decode_layout,
    decode_state,
    edges_to_box,
    encode_layout,
)

from conftest import make_layout


def test_padding_row_encoding():
    lay = make_layout([(2, (0.5, 0.5, 0.4, 0.2))])
    rows = encode_layout(lay).values
    assert rows.shape == (25, 10)
    np.testing.assert_array_equal(rows[1], [0, 0, 0, 0, 0, 1, 0, 0, 0, 0])


def test_real_row_encoding():
    rows = encode_layout(make_layout([(2, (0.5, 0.5, 0.4, 0.2))])).values
    np.testing.assert_array_equal(rows[0], [0, 0, 1, 0, 0, 0, 0.5, 0.5, 0.4, 0.2])
    assert encode_layout(make_layout([(0, (0.5, 0.5, 0.1, 0.1))])).timestep == 0


def test_label_above_padding_class_rejected():
    lay = make_layout([(1, (0.5, 0.5, 0.2, 0.2))])
    bad = Layout((Element(7, (0.5, 0.5, 0.2, 0.2)),) + lay.elements[1:], 5, (1, 1), 1)
    with pytest.raises(InvalidLabelError):
        encode_layout(bad)
    with pytest.raises(InvalidLabelError):
        make_layout([(6, (0.5, 0.5, 0.2, 0.2))])


def test_padding_label_among_real_rejected():
    with pytest.raises(LayoutError):
        make_layout([(5, (0.5, 0.5, 0.2, 0.2))])


def test_off_canvas_box_rejected_unless_permissive():
    with pytest.raises(LayoutError):
        make_layout([(0, (0.05, 0.5, 0.2, 0.2))])
    lay = Layout.from_elements([(0, (0.05, 0.5, 0.2, 0.2))], 5, 25, (1, 1), eps_geom=None)
    assert lay.n_real == 1
    lay = Layout.from_elements([(0, (0.05, 0.5, 0.2, 0.2))], 5, 25, (1, 1), eps_geom=0.06)
    assert lay.n_real == 1


def test_too_many_elements_rejected():
    with pytest.raises(LayoutError):
        make_layout([(0, (0.5, 0.5, 0.1, 0.1))] * 26)


def test_argmax_decoding_and_ties():
    vals = np.zeros((25, 10))
    vals[:, 5] = 1.0
    vals[0, :6] = [0.1, 0.9, -0.3, 0.2, 0.0, 0.05]
    vals[0, 6:] = [0.5, 0.5, 0.2, 0.2]
    vals[1, :6] = [0.7, 0.7, 0.0, 0.0, 0.0, 0.0]
    vals[1, 6:] = [0.5, 0.5, 0.2, 0.2]
    lay = decode_layout(vals)
    assert lay.n_real == 2
    assert [e.label for e in lay.real] == [1, 0]


def test_padding_decode_forces_zero_box():
    vals = np.zeros((3, 10))
    vals[:, 5] = 1.0
    vals[:, 6:] = 0.3
    labels, boxes = decode_state(vals, 5)
    assert np.all(labels == 5)
    assert np.all(boxes == 0)


def test_decode_clamps_boxes():
    vals = np.zeros((2, 10))
    vals[0, 0] = 1.0
    vals[0, 6:] = [-0.1, 0.5, 1.2, 0.3]
    vals[1, 5] = 1.0
    lay = decode_layout(vals)
    assert lay.real[0].box == (0.0, 0.5, 1.0, 0.3)


def test_decode_is_idempotent(rng):
    vals = rng.normal(0.3, 0.6, size=(25, 10))
    once = decode_layout(vals)
    twice = decode_layout(encode_layout(once))
    assert once == twice


@st.composite
def clean_layouts(draw):
    n = draw(st.integers(1, 25))
    items = []
    for _ in range(n):
        w = draw(st.floats(0.0, 1.0))
        h = draw(st.floats(0.0, 1.0))
        cx = draw(st.floats(w / 2, 1 - w / 2)) if w < 1 else 0.5
        cy = draw(st.floats(h / 2, 1 - h / 2)) if h < 1 else 0.5
        items.append((draw(st.integers(0, 4)), (cx, cy, w, h)))
    return Layout.from_elements(items, 5, 25, (draw(st.integers(1, 2000)), draw(st.integers(1, 2000))), eps_geom=None)


@given(clean_layouts())
def test_encode_decode_round_trip(lay):
    assert decode_layout(encode_layout(lay), lay.canvas) == lay


@given(clean_layouts())
def test_json_round_trip(lay):
    back = Layout.from_json(json.loads(lay.dumps()), 5, 25, eps_geom=None)
    assert back == lay


def test_edges_examples():
    assert box_to_edges((0.5, 0.5, 1.0, 1.0)).as_tuple() == (0.0, 0.5, 1.0, 0.0, 0.5, 1.0)
    np.testing.assert_allclose(box_to_edges((0.3, 0.4, 0.2, 0.2)).as_tuple(), (0.2, 0.3, 0.4, 0.3, 0.4, 0.5), atol=1e-15)


@given(st.tuples(*[st.floats(-2, 2)] * 4))
def test_edges_inverse(box):
    back = edges_to_box(box_to_edges(box))
    np.testing.assert_allclose(back, box, atol=1e-12)


def test_edge_jacobian_matches_finite_differences(rng):
    b = rng.uniform(0, 1, 4)
    h = 1e-6
    for k in range(4):
        e = np.zeros(4)
        e[k] = h
        fd = (boxes_to_edges(b + e) - boxes_to_edges(b - e)) / (2 * h)
        np.testing.assert_allclose(fd, EDGE_JACOBIAN[:, k], atol=1e-9)
    np.testing.assert_allclose(boxes_to_edges(b), EDGE_JACOBIAN @ b, atol=1e-15)


def test_edge_ordering_invariant(rng):
    e = boxes_to_edges(np.abs(rng.normal(size=(50, 4))))
    assert np.all(e[:, 0] <= e[:, 1]) and np.all(e[:, 1] <= e[:, 2])
    assert np.all(e[:, 3] <= e[:, 4]) and np.all(e[:, 4] <= e[:, 5])


def test_state_vector_class_count():
    assert StateVector(np.zeros((25, 10))).num_classes == 5
