import math

import numpy as np
import pytest

from noetherrazor import gradcore as gc
from noetherrazor.conserved import SymmetryBank
from noetherrazor.errors import DivergenceError, DomainError, PreconditionError, ShapeError
from noetherrazor.model import (
    MLPArchitecture,
    MLPParameters,
    log_likelihood,
    mlp_forward,
    rollout_mean,
)


def _linear_network(w, b=0.0):
    arch = MLPArchitecture(input_dim=len(w), hidden=())
    return MLPParameters.from_arrays(arch, [np.reshape(w, (1, -1))], [[b]])


def test_architecture():
    arch = MLPArchitecture(input_dim=4, hidden=[8, 3], alpha=2.0)
    assert arch.hidden == (8, 3)
    assert arch.layer_shapes == [(8, 4), (3, 8), (1, 3)]
    assert MLPArchitecture.from_dict(arch.to_dict()) == arch
    with pytest.raises(PreconditionError):
        MLPArchitecture(input_dim=0)
    with pytest.raises(PreconditionError):
        MLPArchitecture(input_dim=2, hidden=(4, 0))
    with pytest.raises(DomainError):
        MLPArchitecture(input_dim=2, alpha=0.0)


def test_parameters(tiny_arch):
    theta = MLPParameters.initialize(tiny_arch, rng=0)
    assert [layer.shape for layer in theta.layers] == [(6, 3), (1, 7)]
    np.testing.assert_array_equal(theta.biases[0], np.zeros(6))
    assert theta.weights[1].shape == (1, 6)
    with pytest.raises(ShapeError):
        MLPParameters(tiny_arch, [np.zeros((6, 3))])
    with pytest.raises(ShapeError):
        MLPParameters(tiny_arch, [np.zeros((6, 2)), np.zeros((1, 7))])
    with pytest.raises(TypeError):
        MLPParameters('arch', [])


def test_forward_shapes(tiny_arch, rng):
    theta = MLPParameters.initialize(tiny_arch, rng)
    assert mlp_forward(theta, rng.standard_normal((5, 2))).shape == (5,)
    assert mlp_forward(theta, rng.standard_normal((3, 5, 2))).shape == (3, 5)
    assert mlp_forward(theta, np.zeros(2)).item() == 0.0
    with pytest.raises(ShapeError):
        mlp_forward(theta, np.zeros(3))


def test_forward_values():
    arch = MLPArchitecture(input_dim=2, hidden=(2,), alpha=1.0)
    theta = MLPParameters.from_arrays(
        arch, [np.eye(2), [[1.0, 1.0]]], [[0.0, 0.0], [0.5]]
    )
    # elu(1) + elu(-1) + 0.5
    out = mlp_forward(theta, [1.0, -1.0]).item()
    assert out == pytest.approx(1.0 + math.exp(-1.0) - 1.0 + 0.5)


def test_linear_energy_rollout_is_exact():
    theta = _linear_network([2.0, -1.0])
    x = np.array([[0.5, 0.5], [1.0, -2.0]])
    out = rollout_mean(theta, SymmetryBank.empty(2), x, dt=0.3, n_steps=4)
    # J grad H = (dH/dp, -dH/dq) = (-1, -2)
    np.testing.assert_allclose(out.value, x + 0.3 * np.array([-1.0, -2.0]))


def test_rollout_shapes(tiny_arch, energy_bank, rng):
    theta = MLPParameters.initialize(tiny_arch, rng)
    taus = rng.standard_normal((3, 1))
    single = rollout_mean(theta, energy_bank, [1.0, 0.0], dt=0.2, n_steps=2, taus=taus)
    assert single.shape == (2,)
    batch = rollout_mean(theta, energy_bank, rng.standard_normal((4, 2)), 0.2, 2, taus)
    assert batch.shape == (4, 2)
    per_step = rng.standard_normal((2, 3, 1))
    assert rollout_mean(theta, energy_bank, np.ones((4, 2)), 0.2, 2, per_step).shape == (4, 2)


def test_rollout_zero_gap_is_identity(tiny_arch, rng):
    theta = MLPParameters.initialize(tiny_arch, rng)
    x = rng.standard_normal((3, 2))
    np.testing.assert_array_equal(
        rollout_mean(theta, SymmetryBank.empty(2), x, dt=0.0).value, x
    )


def test_rollout_errors(tiny_arch, energy_bank, rng):
    theta = MLPParameters.initialize(tiny_arch, rng)
    x = np.ones((2, 2))
    with pytest.raises(PreconditionError, match='Symmetry times'):
        rollout_mean(theta, energy_bank, x, 0.2)
    with pytest.raises(ShapeError):
        rollout_mean(theta, energy_bank, x, 0.2, n_steps=2, taus=np.zeros((3, 3, 1)))
    with pytest.raises(PreconditionError):
        rollout_mean(theta, energy_bank, x, 0.2, n_steps=0, taus=np.zeros((3, 1)))
    with pytest.raises(ShapeError):
        rollout_mean(theta, SymmetryBank.empty(4), np.ones((2, 4)), 0.2)


def test_rollout_divergence():
    theta = _linear_network([1e300, 0.0])
    with pytest.raises(DivergenceError) as info:
        rollout_mean(theta, SymmetryBank.empty(2), [[0.0, 0.0]], dt=1e10, n_steps=1)
    assert info.value.rows == [0]
    assert info.value.step == 1


def test_symmetrised_rollout_gradient_matches_finite_differences(energy_bank, rng):
    arch = MLPArchitecture(input_dim=2, hidden=(3,), alpha=1.0)
    base = MLPParameters.initialize(arch, rng)
    x = rng.standard_normal((2, 2))
    taus = rng.standard_normal((3, 1))
    weights = rng.standard_normal((2, 2))

    def objective(layers):
        theta = MLPParameters(arch, layers)
        pred = rollout_mean(theta, energy_bank, x, dt=0.2, n_steps=2, taus=taus)
        return (pred * weights).sum()

    leaves = [gc.variable(layer.value) for layer in base.layers]
    grads = gc.backward(objective(leaves), leaves)
    eps = 1e-6
    for index, layer in enumerate(base.layers):
        numeric = np.zeros(layer.shape)
        for idx in np.ndindex(layer.shape):
            shifted = []
            for sign in (1.0, -1.0):
                values = [np.array(other.value) for other in base.layers]
                values[index][idx] += sign * eps
                shifted.append(objective(values).item())
            numeric[idx] = (shifted[0] - shifted[1]) / (2 * eps)
        np.testing.assert_allclose(grads[index], numeric, rtol=1e-5, atol=1e-7)


def test_input_gradient_is_differentiable_in_the_weights(rng):
    arch = MLPArchitecture(input_dim=2, hidden=(4, 3), alpha=1.0)
    base = MLPParameters.initialize(arch, rng)
    points = rng.standard_normal((3, 2))
    weights = rng.standard_normal((3, 2))

    def functional(layers):
        x = gc.variable(points)
        slope = gc.grad(mlp_forward(MLPParameters(arch, layers), x).sum(), x)
        return (slope * slope * weights).sum()

    leaves = [gc.variable(layer.value) for layer in base.layers]
    grads = gc.backward(functional(leaves), leaves)
    eps = 1e-6
    for index, layer in enumerate(base.layers):
        numeric = np.zeros(layer.shape)
        for idx in np.ndindex(layer.shape):
            shifted = []
            for sign in (1.0, -1.0):
                values = [np.array(other.value) for other in base.layers]
                values[index][idx] += sign * eps
                shifted.append(functional(values).item())
            numeric[idx] = (shifted[0] - shifted[1]) / (2 * eps)
        np.testing.assert_allclose(grads[index], numeric, rtol=1e-4, atol=1e-7)


def test_log_likelihood():
    pred = np.array([[0.0, 1.0], [1.0, 1.0]])
    target = np.array([[0.0, 1.0], [0.0, 0.0]])
    out = log_likelihood(pred, target, 0.5).value
    norm = -math.log(2 * math.pi * 0.5)
    np.testing.assert_allclose(out, [norm, norm - 2.0])
    assert log_likelihood([1.0, 2.0], [1.0, 2.0], 1.0).shape == ()
    with pytest.raises(DomainError):
        log_likelihood(pred, target, 0.0)
    with pytest.raises(ShapeError):
        log_likelihood(pred, target[:, :1], 1.0)
