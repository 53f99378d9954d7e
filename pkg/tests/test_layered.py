import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from fedsub.layered import (LayeredMatrix, LayerScalars, LayerShape, ShapeMismatchError, add,
                            average, norm_sq, scale_layerwise)

rng = np.random.default_rng(1234)


def random_layered(shapes, rng=rng):
    return LayeredMatrix([rng.standard_normal(s) for s in shapes])


def loop_add(a, b):
    out = []
    for x, y in zip(a.layers, b.layers):
        z = np.empty_like(x)
        for i in range(x.shape[0]):
            for j in range(x.shape[1]):
                z[i, j] = x[i, j] + y[i, j]
        out.append(z)
    return out


def test_additive_identity_and_inverse():
    x = random_layered([(3, 2), (4, 1)])
    zeros = LayeredMatrix.zeros(x.shapes)
    assert add(zeros, x).array_equal(x)
    assert norm_sq(add(x, -x)) == 0.0


def test_add_matches_loop_oracle():
    a = random_layered([(5, 3), (2, 7)])
    b = random_layered([(5, 3), (2, 7)])
    for got, want in zip(add(a, b).layers, loop_add(a, b)):
        np.testing.assert_array_equal(got, want)


def test_shape_mismatch_names_layer():
    a = random_layered([(2, 2), (3, 1)])
    b = random_layered([(2, 2), (4, 1)])
    with pytest.raises(ShapeMismatchError) as err:
        add(a, b)
    assert err.value.layer == 1
    assert "layer 1" in str(err.value)


def test_scale_layerwise():
    x = random_layered([(3, 2), (2, 2)])
    assert scale_layerwise(LayerScalars((1.0, 1.0)), x).array_equal(x)
    assert norm_sq(scale_layerwise([0.0, 0.0], x)) == 0.0
    y = scale_layerwise([2.0, 0.5], x)
    for i in range(3):
        for j in range(2):
            assert y[0][i, j] == 2.0 * x[0][i, j]
    for i in range(2):
        for j in range(2):
            assert y[1][i, j] == 0.5 * x[1][i, j]
    with pytest.raises(ValueError):
        scale_layerwise([1.0], x)


def test_average():
    x = random_layered([(4, 3), (2, 1)])
    assert average([x, x, x]).allclose(x, rtol=1e-15)
    assert norm_sq(average([x, -x])) == 0.0
    xs = [random_layered([(4, 3), (2, 1)]) for _ in range(3)]
    avg = average(xs)
    for l in range(2):
        want = np.zeros(xs[0][l].shape)
        for i in range(want.shape[0]):
            for j in range(want.shape[1]):
                want[i, j] = (xs[0][l][i, j] + xs[1][l][i, j] + xs[2][l][i, j]) / 3
        np.testing.assert_allclose(avg[l], want, rtol=1e-14)
    with pytest.raises(ValueError):
        average([])


def test_norm_sq():
    assert norm_sq(LayeredMatrix.zeros([(3, 3)])) == 0.0
    assert norm_sq(LayeredMatrix([[[3.0, 4.0]]])) == 25.0
    x = random_layered([(6, 4), (3, 5)])
    flat = np.concatenate([a.ravel() for a in x.layers])
    assert norm_sq(x) == pytest.approx(float(flat @ flat), rel=1e-14)


def test_values_are_immutable():
    x = random_layered([(2, 2)])
    with pytest.raises(ValueError):
        x[0][0, 0] = 1.0
    with pytest.raises(AttributeError):
        x.layers = ()


def test_inputs_not_mutated():
    a = random_layered([(3, 3), (2, 4)])
    b = random_layered([(3, 3), (2, 4)])
    a0 = [v.copy() for v in a.layers]
    b0 = [v.copy() for v in b.layers]
    add(a, b), average([a, b]), scale_layerwise([2.0, 3.0], a), norm_sq(b)
    for v, w in zip(a.layers + b.layers, a0 + b0):
        np.testing.assert_array_equal(v, w)


def test_layer_shape_validation():
    with pytest.raises(ValueError):
        LayerShape(0, 3)
    assert LayerShape(4, 3).size == 12


finite = st.floats(-1e3, 1e3, allow_nan=False)
pair_shape = st.tuples(st.integers(1, 6), st.integers(1, 6))


@st.composite
def layered_triples(draw):
    shapes = draw(st.lists(pair_shape, min_size=1, max_size=3))
    make = lambda: LayeredMatrix([draw(arrays(np.float64, s, elements=finite)) for s in shapes])
    return make(), make(), make()


@settings(max_examples=60, deadline=None)
@given(layered_triples())
def test_add_commutative_associative(abc):
    a, b, c = abc
    assert add(a, b).array_equal(add(b, a))
    left, right = add(add(a, b), c), add(a, add(b, c))
    scale = max(1.0, max(np.max(np.abs(v)) for v in a.layers + b.layers + c.layers))
    for x, y in zip(left.layers, right.layers):
        assert np.max(np.abs(x - y)) <= 1e-12 * scale


@settings(max_examples=60, deadline=None)
@given(layered_triples())
def test_triangle_inequality(abc):
    a, b, _ = abc
    lhs = norm_sq(add(a, b))
    rhs = (np.sqrt(norm_sq(a)) + np.sqrt(norm_sq(b))) ** 2
    assert lhs <= rhs * (1 + 1e-12) + 1e-300


@settings(max_examples=30, deadline=None)
@given(layered_triples())
def test_singleton_average_is_identity(abc):
    a = abc[0]
    assert average([a]).array_equal(a)
