import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mfglab.fields import AffineVectorField, ScalarField, parse_spec


def fd_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in range(x.shape[1]):
        e = np.zeros(x.shape[1])
        e[i] = h
        g[:, i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def test_parse_compact_and_dict():
    assert parse_spec("linear:a=[1,0]") == ("linear", {"a": [1, 0]})
    assert parse_spec("quadratic:c=2,center=[0.5]") == ("quadratic", {"c": 2, "center": [0.5]})
    assert parse_spec({"kind": "const", "c": 3}) == ("const", {"c": 3})
    assert parse_spec("zero") == ("zero", {})


def test_parse_rejects_non_string():
    with pytest.raises(ValueError):
        parse_spec(3.0)


def test_scalar_examples():
    lin = ScalarField.from_spec("linear:a=[1,-2],c=0.5", 2)
    assert lin.value(np.array([[1.0, 1.0]]))[0] == pytest.approx(-0.5)
    quad = ScalarField.from_spec("quadratic:c=2,center=[1]", 1)
    assert quad.value(np.array([[3.0]]))[0] == pytest.approx(4.0)
    assert quad.grad(np.array([[3.0]]))[0, 0] == pytest.approx(4.0)
    assert quad.hess(np.array([[3.0]]))[0, 0, 0] == pytest.approx(2.0)
    const = ScalarField.from_spec("const:c=0.7", 1)
    assert const.value(np.array([[0.3]]))[0] == pytest.approx(0.7)
    assert ScalarField.from_spec("zero", 2).is_zero()
    assert not const.is_zero()


def test_unknown_parameter_rejected():
    with pytest.raises(ValueError, match="unknown parameter"):
        ScalarField.from_spec("const:c0=0.7", 1)
    with pytest.raises(ValueError, match="unknown parameter"):
        AffineVectorField.from_spec("const:c=[1]", 1)


def test_unknown_kind_and_shape_errors():
    with pytest.raises(ValueError):
        ScalarField.from_spec("cubic:c=1", 1)
    with pytest.raises(ValueError):
        ScalarField.from_spec("linear:a=[1,2]", 1)
    with pytest.raises(ValueError):
        AffineVectorField.from_spec("affine:A=[[1,0]]", 2)


def test_label_is_canonical():
    f = ScalarField.from_spec("quadratic:center=[0.5],c=2", 1)
    g = ScalarField.from_spec({"kind": "quadratic", "c": 2, "center": [0.5]}, 1)
    assert f.label == g.label == "quadratic:c=2,center=[0.5]"


@pytest.mark.parametrize("spec", ["linear:a=[0.3,-1],c=2", "quadratic:c=1.5,center=[0.2,-0.1],c0=1",
                                  "bump:amp=0.8,center=[0.1,0.3],width=0.4"])
def test_scalar_derivatives_match_differences(spec, rng):
    f = ScalarField.from_spec(spec, 2)
    X = rng.uniform(-1, 1, size=(20, 2))
    np.testing.assert_allclose(f.grad(X), fd_grad(f.value, X), atol=1e-7)
    H = np.stack([fd_grad(lambda Y: f.grad(Y)[:, i], X) for i in range(2)], axis=1)
    np.testing.assert_allclose(f.hess(X), H, atol=1e-6)


def test_affine_drift():
    b = AffineVectorField.from_spec("affine:b=[1,0],A=[[0,1],[-1,0]]", 2)
    X = np.array([[2.0, 3.0]])
    np.testing.assert_allclose(b.value(X), [[4.0, -2.0]])
    np.testing.assert_allclose(b.jacobian(X)[0], [[0, 1], [-1, 0]])
    assert AffineVectorField.from_spec("zero", 2).is_zero()


@settings(max_examples=50, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(0.1, 4))
def test_quadratic_field_minimum_at_center(cx, x, c):
    f = ScalarField.from_spec({"kind": "quadratic", "c": c, "center": [cx]}, 1)
    assert f.value(np.array([[x]]))[0] >= f.value(np.array([[cx]]))[0] - 1e-12
