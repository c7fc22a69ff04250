import numpy as np
import pytest

from noetherrazor import gradcore as gc
from noetherrazor.errors import DomainError, PreconditionError, ShapeError


def _numeric_grad(func, x, eps=1e-6):
    out = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        step = np.zeros_like(x)
        step[idx] = eps
        out[idx] = (func(x + step) - func(x - step)) / (2 * eps)
    return out


def test_node_is_read_only():
    node = gc.variable([1.0, 2.0])
    with pytest.raises(ValueError):
        node.value[0] = 3.0
    assert node.requires_grad
    assert not gc.constant([1.0]).requires_grad
    assert 'variable' in repr(node)


def test_constants_do_not_record():
    out = gc.constant([1.0, 2.0]) * 3.0 + 1.0
    assert not out.requires_grad
    assert out.parents == ()


def test_square_gradient(rng):
    x = gc.variable(rng.standard_normal(5))
    (g,) = gc.backward((x * x).sum(), [x])
    np.testing.assert_allclose(g, 2 * x.value)


def test_broadcast_gradient_shapes(rng):
    a = gc.variable(rng.standard_normal((3, 4)))
    b = gc.variable(rng.standard_normal(4))
    ga, gb = gc.backward((a * b + b).sum(), [a, b])
    assert ga.shape == (3, 4)
    assert gb.shape == (4,)
    np.testing.assert_allclose(gb, a.value.sum(axis=0) + 3.0)


def test_ndarray_on_the_left_defers_to_node(rng):
    x = gc.variable(rng.standard_normal(3))
    out = np.ones(3) * x
    assert isinstance(out, gc.Node)
    assert out.requires_grad


def test_second_derivative():
    x = gc.variable([0.5, -1.5, 2.0])
    first = gc.grad((x**3).sum(), x)
    np.testing.assert_allclose(first.value, 3 * x.value**2)
    (second,) = gc.backward(first.sum(), [x])
    np.testing.assert_allclose(second, 6 * x.value)


def test_mixed_second_derivative(rng):
    w = gc.variable(rng.standard_normal(3))
    x = gc.variable(rng.standard_normal(3))
    gx = gc.grad((w * x * x).sum(), x)
    (gw,) = gc.backward(gx.sum(), [w])
    np.testing.assert_allclose(gw, 2 * x.value)


def test_matmul_gradient_matches_finite_differences(rng):
    a0 = rng.standard_normal((2, 3, 4))
    b = rng.standard_normal((4, 2))

    def func(a):
        return float(np.sum(np.sin(a @ b)))

    a = gc.variable(a0)
    prod = a @ b
    # d sum(sin(u)) = cos(u) du, with cos(u) fed in as a constant weight
    weights = np.cos(prod.value)
    (g,) = gc.backward((prod * weights).sum(), [a])
    np.testing.assert_allclose(g, _numeric_grad(func, a0), rtol=1e-6, atol=1e-8)


def test_getitem_and_concatenate_gradients(rng):
    x = gc.variable(rng.standard_normal((2, 4)))
    left, right = x[:, :2], x[..., 2:]
    out = gc.concatenate([right * 2.0, left], axis=-1)
    (g,) = gc.backward(out.sum(), [x])
    np.testing.assert_allclose(g, [[1, 1, 2, 2], [1, 1, 2, 2]])


def test_fancy_index_accumulates():
    x = gc.variable([1.0, 2.0, 3.0])
    (g,) = gc.backward(x[[0, 0, 2]].sum(), [x])
    np.testing.assert_allclose(g, [2.0, 0.0, 1.0])


def test_elu_values_and_slopes():
    x = gc.variable([-1.0, 0.5])
    out = gc.elu(x, alpha=2.0)
    np.testing.assert_allclose(out.value, [2.0 * (np.exp(-1.0) - 1.0), 0.5])
    (g,) = gc.backward(out.sum(), [x])
    np.testing.assert_allclose(g, [2.0 * np.exp(-1.0), 1.0])


def test_reductions(rng):
    x = gc.variable(rng.standard_normal((3, 4)))
    np.testing.assert_allclose(x.mean(axis=0).value, x.value.mean(axis=0))
    np.testing.assert_allclose(
        x.sum(axis=1, keepdims=True).value, x.value.sum(axis=1, keepdims=True)
    )
    (g,) = gc.backward(x.mean(), [x])
    np.testing.assert_allclose(g, np.full((3, 4), 1 / 12))


def test_domain_errors():
    with pytest.raises(DomainError):
        gc.log(gc.constant([1.0, 0.0]))
    with pytest.raises(DomainError):
        gc.sqrt(gc.constant([-1.0]))


def test_gradient_preconditions(rng):
    x = gc.variable(rng.standard_normal(3))
    with pytest.raises(ShapeError, match='scalar'):
        gc.backward(x * 2.0, [x])
    with pytest.raises(PreconditionError):
        gc.backward(x.sum(), [gc.constant([1.0])])
    with pytest.raises(ShapeError):
        gc.constant([1.0, 2.0]).item()


def test_unrelated_variable_gets_zero_gradient(rng):
    x = gc.variable(rng.standard_normal(3))
    y = gc.variable(rng.standard_normal(2))
    gx, gy = gc.backward((x * x).sum(), [x, y])
    np.testing.assert_array_equal(gy, np.zeros(2))
    assert gx.shape == (3,)


@pytest.mark.parametrize('angle', [0.3, 2.0, 40.0])
def test_matexp_rotation(angle):
    gen = np.array([[0.0, angle], [-angle, 0.0]])
    expected = np.array(
        [[np.cos(angle), np.sin(angle)], [-np.sin(angle), np.cos(angle)]]
    )
    np.testing.assert_allclose(gc.matexp(gen).value, expected, atol=1e-10)


def test_matexp_zero_and_batch(rng):
    np.testing.assert_array_equal(gc.matexp(np.zeros((3, 3))).value, np.eye(3))
    batch = rng.standard_normal((4, 3, 3)) * 0.5
    out = gc.matexp(batch).value
    for i in range(4):
        # exp(A) exp(-A) = I
        back = gc.matexp(-batch[i]).value
        np.testing.assert_allclose(out[i] @ back, np.eye(3), atol=1e-10)


def test_matexp_nilpotent():
    # exp of a strictly upper triangular 2x2 is I + N
    gen = np.array([[0.0, 3.0], [0.0, 0.0]])
    np.testing.assert_allclose(gc.matexp(gen).value, [[1.0, 3.0], [0.0, 1.0]])


def test_matexp_gradient_matches_finite_differences(rng):
    m0 = rng.standard_normal((3, 3))
    weights = rng.standard_normal((3, 3))

    def func(m):
        return float(np.sum(gc.matexp(m).value * weights))

    m = gc.variable(m0)
    (g,) = gc.backward((gc.matexp(m) * weights).sum(), [m])
    np.testing.assert_allclose(g, _numeric_grad(func, m0), rtol=1e-5, atol=1e-7)


def test_matexp_adds_commuting_exponents(rng):
    m = rng.standard_normal((4, 4))
    s, t = 0.8, -1.7
    np.testing.assert_allclose(
        gc.matexp(m * (s + t)).value,
        gc.matexp(m * s).value @ gc.matexp(m * t).value,
        rtol=1e-9,
        atol=1e-9,
    )


def test_matexp_errors():
    with pytest.raises(ShapeError):
        gc.matexp(np.zeros((2, 3)))
    with pytest.raises(DomainError):
        gc.matexp(np.array([[np.nan, 0.0], [0.0, 0.0]]))


def test_svd(rng):
    mat = rng.standard_normal((4, 6))
    u, sigma, v = gc.svd(mat)
    np.testing.assert_allclose(u @ np.diag(sigma) @ v.T, mat, atol=1e-12)
    assert np.all(np.diff(sigma) <= 0)
    with pytest.raises(ShapeError):
        gc.svd(np.zeros(3))
    with pytest.raises(DomainError):
        gc.svd(np.array([[np.inf]]))


def test_svd_of_a_rank_one_matrix(rng):
    u0 = rng.standard_normal(4)
    v0 = rng.standard_normal(5)
    u0 *= 2.0 / np.linalg.norm(u0)
    v0 *= 3.0 / np.linalg.norm(v0)
    u, sigma, v = gc.svd(np.outer(u0, v0))
    np.testing.assert_allclose(sigma, [6.0, 0.0, 0.0, 0.0], atol=1e-12)
    np.testing.assert_allclose(np.abs(u[:, 0]), np.abs(u0) / 2.0, atol=1e-12)
    np.testing.assert_allclose(np.abs(v[:, 0]), np.abs(v0) / 3.0, atol=1e-12)


def test_svd_squares_are_gram_eigenvalues(rng):
    mat = rng.standard_normal((5, 9))
    _, sigma, _ = gc.svd(gc.constant(mat))
    eigen = np.linalg.eigvalsh(mat @ mat.T)[::-1]
    np.testing.assert_allclose(sigma**2, eigen, rtol=1e-8, atol=1e-8)
