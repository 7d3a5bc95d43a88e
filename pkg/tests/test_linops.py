import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from neumann_networks import linops
from neumann_networks.errors import DimensionError
from neumann_networks.linops import ForwardModel, ModelKind, ModelSpec, build_forward_model


def naive_matvec(A, x):
    out = []
    for i in range(len(A)):
        s = 0.0
        for j in range(len(x)):
            s += A[i][j] * x[j]
        out.append(s)
    return np.array(out)


@pytest.fixture
def inpaint5():
    return build_forward_model(ModelSpec.inpainting(10, range(5)))


def random_model(seed, m=4, p=6):
    return ForwardModel(np.random.default_rng(seed).standard_normal((m, p)))


def test_apply_inpainting_selects_rows(inpaint5):
    beta = np.arange(1.0, 11.0)
    np.testing.assert_array_equal(linops.apply(inpaint5, beta), [1, 2, 3, 4, 5])


def test_apply_zero(inpaint5):
    assert np.all(linops.apply(inpaint5, np.zeros(10)) == 0)
    assert linops.apply(inpaint5, np.zeros(10)).shape == (5,)


def test_apply_matches_naive_product():
    model = random_model(3)
    beta = np.random.default_rng(4).standard_normal(6)
    np.testing.assert_allclose(linops.apply(model, beta),
                               naive_matvec(model.matrix.tolist(), beta.tolist()), rtol=1e-13)


def test_apply_batch_rows():
    model = random_model(5)
    betas = np.random.default_rng(6).standard_normal((7, 6))
    out = linops.apply(model, betas)
    for b, o in zip(betas, out):
        np.testing.assert_allclose(o, model.matrix @ b, rtol=1e-13)


@pytest.mark.parametrize("fn,size", [(linops.apply, 3), (linops.adjoint, 10), (linops.gram, 4)])
def test_dimension_errors(inpaint5, fn, size):
    with pytest.raises(DimensionError):
        fn(inpaint5, np.zeros(size))


def test_adjoint_zero_fill(inpaint5):
    out = linops.adjoint(inpaint5, np.arange(1.0, 6.0))
    np.testing.assert_array_equal(out, [1, 2, 3, 4, 5, 0, 0, 0, 0, 0])
    assert np.all(linops.adjoint(inpaint5, np.zeros(5)) == 0)


@pytest.mark.parametrize("seed", range(5))
def test_adjoint_dot_product(seed):
    model = random_model(seed, 5, 9)
    rng = np.random.default_rng(seed + 100)
    for _ in range(100):
        u, v = rng.standard_normal(9), rng.standard_normal(5)
        lhs = linops.apply(model, u) @ v
        rhs = u @ linops.adjoint(model, v)
        assert abs(lhs - rhs) <= 1e-10 * np.linalg.norm(u) * np.linalg.norm(v)


def test_gram_inpainting_is_projector(inpaint5):
    beta = np.arange(1.0, 11.0)
    np.testing.assert_array_equal(linops.gram(inpaint5, beta), [1, 2, 3, 4, 5, 0, 0, 0, 0, 0])
    null = np.r_[np.zeros(5), np.ones(5)]
    assert np.all(linops.gram(inpaint5, null) == 0)
    g = linops.gram(inpaint5, np.random.default_rng(0).standard_normal(10))
    np.testing.assert_allclose(linops.gram(inpaint5, g), g, atol=1e-12)


@given(st.integers(0, 2 ** 31 - 1))
@settings(max_examples=30, deadline=None)
def test_gram_composition_and_psd(seed):
    rng = np.random.default_rng(seed)
    model = ForwardModel(rng.standard_normal((rng.integers(1, 6), 6)))
    beta = rng.standard_normal(6)
    g = linops.gram(model, beta)
    np.testing.assert_allclose(g, model.matrix.T @ (model.matrix @ beta), rtol=1e-12, atol=1e-12)
    assert g @ beta >= -1e-12 * (beta @ beta)


def test_inpainting_spec():
    model = build_forward_model(ModelSpec.inpainting(10, range(5)))
    assert (model.m, model.p) == (5, 10)
    assert model.orthonormal_rows
    assert linops.check_orthonormal_rows(model, 1e-10)
    # each row a distinct standard basis vector
    assert sorted(np.argmax(model.matrix, axis=1)) == list(range(5))
    assert np.all(model.matrix.sum(axis=1) == 1)


def test_blur_is_ill_conditioned_and_not_orthonormal():
    model = build_forward_model(ModelSpec.gaussian_blur(8, 5, 5.0))
    assert model.matrix.shape == (64, 64)
    s = np.linalg.svd(model.matrix, compute_uv=False)
    assert s.min() < 1e-2 * s.max()
    assert not linops.check_orthonormal_rows(model, 1e-10)
    # sum-to-one kernel keeps constants fixed
    np.testing.assert_allclose(linops.apply(model, np.ones(64)), np.ones(64), rtol=1e-13)


def test_blur_matches_circular_convolution():
    side = 8
    kernel = linops.gaussian_kernel(5, 1.2)
    model = build_forward_model(ModelSpec.gaussian_blur(side, 5, 1.2))
    img = np.random.default_rng(1).standard_normal((side, side))
    # circular correlation via direct wraparound sums
    expected = np.zeros_like(img)
    for r in range(side):
        for c in range(side):
            expected[r, c] = sum(kernel[a, b] * img[(r + a - 2) % side, (c + b - 2) % side]
                                 for a in range(5) for b in range(5))
    np.testing.assert_allclose(linops.apply(model, img.ravel()), expected.ravel(), rtol=1e-12)


def test_downsample_rows_average():
    model = build_forward_model(ModelSpec.downsample(8, 2))
    assert model.matrix.shape == (16, 64)
    np.testing.assert_allclose(model.matrix.sum(axis=1), 1.0)
    img = np.arange(64.0).reshape(8, 8)
    assert linops.apply(model, img.ravel())[0] == pytest.approx(img[:2, :2].mean())


def test_gaussian_sensing_orthonormalized():
    model = build_forward_model(ModelSpec.gaussian_sensing(12, 24, seed=7, row_orthonormalize=True))
    X = model.matrix
    assert np.max(np.abs(X @ X.T - np.eye(12))) <= 1e-10
    assert linops.check_orthonormal_rows(model, 1e-10)


def test_gaussian_sensing_variance():
    model = build_forward_model(ModelSpec.gaussian_sensing(200, 300, seed=1))
    assert np.var(model.matrix) == pytest.approx(1 / 200, rel=0.05)
    assert not linops.check_orthonormal_rows(model, 1e-10)


@pytest.mark.parametrize("spec", [
    ModelSpec.gaussian_sensing(12, 24, seed=3, row_orthonormalize=True),
    ModelSpec.gaussian_blur(8, 3, 1.0),
    ModelSpec.inpainting(6, [5, 1, 2]),
    ModelSpec.downsample(16, 4),
])
def test_construction_deterministic_and_json_roundtrip(spec):
    a = build_forward_model(spec)
    restored = ModelSpec.from_json(spec.to_json())
    assert restored == spec
    b = build_forward_model(restored)
    assert a.matrix.tobytes() == b.matrix.tobytes()
    json.loads(spec.to_json())


@pytest.mark.parametrize("spec", [
    ModelSpec.gaussian_blur(4, 5, 1.0),
    ModelSpec.downsample(8, 3),
    ModelSpec.inpainting(5, [0, 1, 1]),
    ModelSpec.inpainting(5, [7]),
    ModelSpec.gaussian_blur(8, 3, 1.0, boundary="reflect"),
])
def test_invalid_specs(spec):
    with pytest.raises(ValueError):
        build_forward_model(spec)


def test_nonfinite_matrix_rejected():
    with pytest.raises(ValueError):
        ForwardModel(np.array([[1.0, np.nan]]))


def test_check_orthonormal_rows_requires_positive_tol(inpaint5):
    with pytest.raises(ValueError):
        linops.check_orthonormal_rows(inpaint5, 0.0)


def test_model_kind_recorded(inpaint5):
    assert inpaint5.kind is ModelKind.INPAINTING
