import numpy as np
import pytest

from noetherrazor import gradcore as gc
from noetherrazor.conserved import (
    QuadraticObservable,
    SymmetryBank,
    TauMeasure,
    bracket_residual,
    combined_flow,
    flow,
    generator,
    orbit_transforms,
    quadratic_bracket,
    sample_tau,
    symmetrize,
    value,
)
from noetherrazor.dynamics import hamiltonian_field, hamiltonian_vector_field, poisson_bracket
from noetherrazor.errors import DomainError, PreconditionError, ShapeError


def _random_observable(rng, m):
    return QuadraticObservable(rng.standard_normal((m, m)), rng.standard_normal(m))


def _square_q(x):
    return x[..., 0] * x[..., 0]


def test_observable_is_symmetrised():
    c = QuadraticObservable([[1.0, 2.0], [0.0, 3.0]])
    np.testing.assert_array_equal(c.A, [[1.0, 1.0], [1.0, 3.0]])
    np.testing.assert_array_equal(c.b, [0.0, 0.0])
    assert value(c, [1.0, 1.0]) == pytest.approx(3.0)
    with pytest.raises(ValueError):
        c.A[0, 0] = 5.0
    with pytest.raises(ShapeError):
        QuadraticObservable(np.eye(3))
    with pytest.raises(ShapeError):
        QuadraticObservable(np.eye(2), [1.0])


def test_observable_field_matches_value(rng):
    c = _random_observable(rng, 4)
    points = rng.standard_normal((5, 4))
    np.testing.assert_allclose(c.field()(gc.constant(points)).value, value(c, points))
    assert c.field()(gc.constant(points[0])).shape == ()
    assert (c * 0.0).is_zero()
    np.testing.assert_allclose((c + c).b, 2 * c.b)


def test_energy_flow_is_a_rotation():
    energy = QuadraticObservable(np.eye(2))
    np.testing.assert_allclose(flow(energy, np.pi / 2, [1.0, 0.0]), [0.0, -1.0], atol=1e-12)
    tau = 0.7
    x = np.array([0.4, -1.3])
    expected = [
        x[0] * np.cos(tau) + x[1] * np.sin(tau),
        -x[0] * np.sin(tau) + x[1] * np.cos(tau),
    ]
    np.testing.assert_allclose(flow(energy, tau, x), expected, atol=1e-12)


def test_momentum_flow_is_a_translation():
    momentum = QuadraticObservable(np.zeros((2, 2)), [0.0, 1.0])
    np.testing.assert_allclose(flow(momentum, 2.0, [1.0, 3.0]), [3.0, 3.0], atol=1e-12)


def test_flow_conserves_the_observable(rng):
    c = QuadraticObservable(np.diag([1.0, 2.0, 1.0, 0.5]), rng.standard_normal(4))
    points = rng.standard_normal((6, 4))
    moved = flow(c, 0.9, points)
    assert moved.shape == points.shape
    np.testing.assert_allclose(value(c, moved), value(c, points), rtol=1e-9, atol=1e-9)


def test_generator_applies_the_vector_field(rng):
    c = _random_observable(rng, 4)
    x = rng.standard_normal(4)
    out = generator(c).apply(x)
    assert generator(c).phase_dim == 4
    np.testing.assert_allclose(out[:4], hamiltonian_vector_field(c.field(), x))
    assert out[4] == 0.0


def test_combined_flow_of_empty_bank_is_identity():
    x = np.array([0.5, 1.5])
    np.testing.assert_array_equal(combined_flow(SymmetryBank.empty(2), [], x), x)


def test_combined_flow_shape_errors(energy_bank):
    with pytest.raises(ShapeError):
        combined_flow(energy_bank, [0.1, 0.2], [1.0, 0.0])
    with pytest.raises(ShapeError):
        combined_flow(energy_bank, [0.1], [1.0, 0.0, 0.0, 0.0])
    with pytest.raises(ShapeError):
        orbit_transforms(energy_bank, np.zeros((3, 2)))


def test_quadratic_bracket_matches_poisson_bracket(rng):
    c1 = _random_observable(rng, 4)
    c2 = _random_observable(rng, 4)
    quad, const = quadratic_bracket(c1, c2)
    points = rng.standard_normal((5, 4))
    np.testing.assert_allclose(
        value(quad, points) + const,
        poisson_bracket(c1.field(), c2.field(), points),
        rtol=1e-10,
        atol=1e-10,
    )


def test_bracket_residual():
    q = QuadraticObservable(np.zeros((2, 2)), [1.0, 0.0])
    p = QuadraticObservable(np.zeros((2, 2)), [0.0, 1.0])
    energy = QuadraticObservable(np.eye(2))
    assert bracket_residual(SymmetryBank.from_quantities([q, p, energy])) < 1e-12
    assert bracket_residual(SymmetryBank.from_quantities([energy])) == 0.0
    half_square = QuadraticObservable(np.diag([1.0, 0.0]))
    # {q^2 / 2, p} = q lies outside the span
    assert bracket_residual(SymmetryBank.from_quantities([half_square, p])) == pytest.approx(1.0)


def test_symmetrize_keeps_invariant_fields(sho, energy_bank, rng):
    h = hamiltonian_field(sho)
    points = rng.standard_normal((4, 2))
    taus = rng.standard_normal((7, 1))
    np.testing.assert_allclose(
        symmetrize(h, energy_bank, points, taus).value,
        h(gc.constant(points)).value,
        rtol=1e-10,
    )


def test_symmetrize_averages_over_the_orbit(energy_bank):
    taus = np.linspace(0.0, 2 * np.pi, 16, endpoint=False)[:, None]
    x = np.array([[0.3, 1.1], [-2.0, 0.5]])
    out = symmetrize(_square_q, energy_bank, x, taus)
    np.testing.assert_allclose(out.value, 0.5 * np.sum(x**2, axis=1), rtol=1e-10)
    single = symmetrize(_square_q, energy_bank, x[0], taus)
    assert single.shape == ()


def test_symmetrize_with_empty_bank(rng):
    x = rng.standard_normal((3, 2))
    out = symmetrize(_square_q, SymmetryBank.empty(2), x, np.zeros((5, 0)))
    np.testing.assert_allclose(out.value, x[:, 0] ** 2)
    with pytest.raises(ShapeError):
        symmetrize(_square_q, SymmetryBank.empty(4), x, np.zeros((5, 0)))


def test_flow_is_a_one_parameter_group(rng):
    c = _random_observable(rng, 4) * 0.5
    points = rng.standard_normal((3, 4))
    s, t = 0.7, -0.3
    np.testing.assert_allclose(
        flow(c, s + t, points), flow(c, s, flow(c, t, points)), rtol=1e-9, atol=1e-9
    )
    np.testing.assert_allclose(flow(c, 0.0, points), points, atol=1e-12)


def test_combined_flow_follows_the_summed_observable(rng):
    quantities = [_random_observable(rng, 4) * 0.5 for _ in range(2)]
    bank = SymmetryBank.from_quantities(quantities)
    tau = np.array([0.4, -0.9])
    points = rng.standard_normal((3, 4))
    summed = quantities[0] * tau[0] + quantities[1] * tau[1]
    np.testing.assert_allclose(
        combined_flow(bank, tau, points), flow(summed, 1.0, points), rtol=1e-9, atol=1e-9
    )


def test_commuting_translations_compose_in_either_order(rng):
    first = QuadraticObservable(np.zeros((4, 4)), [1.0, 0.0, 0.0, 0.0])
    second = QuadraticObservable(np.zeros((4, 4)), [0.0, 1.0, 0.0, 0.0])
    x = rng.standard_normal(4)
    np.testing.assert_allclose(
        flow(first, 1.3, flow(second, -0.6, x)),
        flow(second, -0.6, flow(first, 1.3, x)),
        atol=1e-10,
    )


def _lopsided(x):
    # not invariant under any of the bank's flows
    return gc.exp(x[..., 0] * 0.3) + x[..., 0] * x[..., 1] * x[..., 1]


def _central_difference(func, x0, eps=1e-6):
    out = np.zeros_like(x0)
    for idx in np.ndindex(x0.shape):
        step = np.zeros_like(x0)
        step[idx] = eps
        out[idx] = (func(x0 + step) - func(x0 - step)) / (2 * eps)
    return out


def test_symmetrize_gradients_match_finite_differences(rng):
    bank = SymmetryBank.initialize(2, 2, 5, std=0.3)
    raw0, b0 = np.array(bank.raw_a.value), np.array(bank.b.value)
    x0 = rng.standard_normal((3, 2))
    taus = rng.standard_normal((4, 2))

    def total(raw_a, b, x):
        return symmetrize(_lopsided, SymmetryBank(raw_a, b), x, taus).sum()

    raw_var, b_var, x_var = gc.variable(raw0), gc.variable(b0), gc.variable(x0)
    g_raw, g_b, g_x = gc.backward(total(raw_var, b_var, x_var), [raw_var, b_var, x_var])
    expected = [
        _central_difference(lambda r: float(total(r, b0, x0).value), raw0),
        _central_difference(lambda v: float(total(raw0, v, x0).value), b0),
        _central_difference(lambda v: float(total(raw0, b0, v).value), x0),
    ]
    for got, want in zip([g_raw, g_b, g_x], expected):
        np.testing.assert_allclose(got, want, rtol=1e-4, atol=1e-7)


def test_bank_construction(rng):
    bank = SymmetryBank.initialize(3, 4, rng)
    assert (bank.n_quantities, bank.phase_dim, bank.trainable) == (3, 4, True)
    assert np.max(np.abs(bank.raw_a.value)) < 0.1
    np.testing.assert_array_equal(
        SymmetryBank.initialize(3, 4, 7).b.value, SymmetryBank.initialize(3, 4, 7).b.value
    )
    a_sym = bank.symmetric_a().value
    np.testing.assert_allclose(a_sym, np.swapaxes(a_sym, 1, 2))
    assert bank.generators().shape == (3, 5, 5)
    assert bank.as_variables().raw_a.requires_grad
    assert not bank.frozen().trainable
    with pytest.raises(PreconditionError):
        SymmetryBank.initialize(-1, 2)
    with pytest.raises(PreconditionError):
        SymmetryBank.from_quantities([])
    with pytest.raises(ShapeError):
        SymmetryBank(np.zeros((2, 3, 3)), np.zeros((2, 3)))
    with pytest.raises(ShapeError):
        SymmetryBank.from_quantities(
            [QuadraticObservable(np.eye(2)), QuadraticObservable(np.eye(4))]
        )


def test_bank_serialisation(rng):
    bank = SymmetryBank.initialize(2, 4, rng)
    document = bank.to_dict()
    assert len(document['quantities'][0]['A']) == 10
    restored = SymmetryBank.from_dict(document)
    for before, after in zip(bank.quantities(), restored.quantities()):
        np.testing.assert_allclose(after.A, before.A)
        np.testing.assert_array_equal(after.b, before.b)
    assert restored.trainable
    assert SymmetryBank.from_dict(SymmetryBank.empty(2).to_dict()).n_quantities == 0


def test_tau_measure():
    assert TauMeasure().kind == 'normal'
    with pytest.raises(PreconditionError):
        TauMeasure(kind='cauchy')
    with pytest.raises(DomainError):
        TauMeasure(kind='uniform', lo=1.0, hi=1.0)


def test_sample_tau(rng):
    taus = sample_tau(TauMeasure('uniform', 0.0, 2 * np.pi), 3, 50, rng)
    assert taus.shape == (50, 3)
    assert taus.min() >= 0.0 and taus.max() < 2 * np.pi
    np.testing.assert_array_equal(
        sample_tau(TauMeasure(), 2, 4, 3), sample_tau(TauMeasure(), 2, 4, 3)
    )
    assert sample_tau(TauMeasure(), 0, 4, 3).shape == (4, 0)
    with pytest.raises(PreconditionError):
        sample_tau(TauMeasure(), 2, 0, rng)
