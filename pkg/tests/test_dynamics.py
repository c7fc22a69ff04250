import numpy as np
import pytest

from noetherrazor import dynamics
from noetherrazor import gradcore as gc
from noetherrazor.conserved import QuadraticObservable, quadratic_bracket, value
from noetherrazor.dynamics import (
    ENERGY_DRIFT_TOL,
    DataRecipe,
    Dataset,
    SystemSpec,
    energy_drift,
    ground_truth_gradient,
    ground_truth_hamiltonian,
    hamiltonian_field,
    hamiltonian_vector_field,
    max_internal_step,
    poisson_bracket,
    recipe_for,
    rk4_integrate,
    rk4_simulate,
    sample_dataset,
    symplectic_form,
)
from noetherrazor.errors import DivergenceError, PreconditionError, ShapeError


def test_system_spec_validation():
    with pytest.raises(PreconditionError, match='Unsupported system'):
        SystemSpec(kind='pendulum')
    with pytest.raises(ShapeError):
        SystemSpec(kind='nharm', n=3, masses=(1.0, 1.0))
    with pytest.raises(ValueError):
        SystemSpec(kind='nbody', n=2, masses=(1.0, -1.0))
    assert SystemSpec(kind='sho', n=4).n == 1
    assert SystemSpec(kind='nbody', n=3, d=2).phase_dim == 12
    assert SystemSpec(kind='nharm', n=3).label == 'nharm(3)'


def test_sign_alias():
    spec = SystemSpec(kind='nbody', n=2, sign='paper-verbatim')
    assert spec.sign == 'repulsive'
    assert spec.potential_sign == 1.0
    assert spec == SystemSpec(kind='nbody', n=2, sign='repulsive')
    assert SystemSpec.from_dict(spec.to_dict()).sign == 'repulsive'
    with pytest.raises(PreconditionError, match='potential sign'):
        SystemSpec(kind='nbody', n=2, sign='verbatim')


def test_system_spec_dict():
    spec = SystemSpec(kind='nbody', n=2, d=3, masses=(1.0, 2.0), sign='repulsive')
    assert SystemSpec.from_dict(spec.to_dict()) == spec


def test_symplectic_form():
    jmat = symplectic_form(4)
    np.testing.assert_array_equal(jmat @ jmat, -np.eye(4))
    np.testing.assert_array_equal(jmat.T, -jmat)
    with pytest.raises(ShapeError):
        symplectic_form(3)


def test_sho_energy(sho):
    assert ground_truth_hamiltonian(sho, [1.0, 0.0]) == pytest.approx(0.5)
    np.testing.assert_allclose(
        ground_truth_hamiltonian(sho, [[1.0, 1.0], [0.0, 2.0]]), [1.0, 2.0]
    )
    with pytest.raises(ShapeError):
        ground_truth_hamiltonian(sho, [1.0, 0.0, 0.0, 0.0])


def test_nbody_energy_two_bodies():
    spec = SystemSpec(kind='nbody', n=2, d=2, eps=0.1)
    x = np.array([0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0])
    # both ordered pairs contribute -1 / sqrt(1 + eps^2)
    expected = -2.0 / np.sqrt(1.0 + 0.01)
    assert ground_truth_hamiltonian(spec, x) == pytest.approx(expected)
    flipped = SystemSpec(kind='nbody', n=2, d=2, eps=0.1, sign='repulsive')
    assert ground_truth_hamiltonian(flipped, x) == pytest.approx(-expected)


@pytest.mark.parametrize('spec', [
    SystemSpec(kind='sho'),
    SystemSpec(kind='nharm', n=3, k=2.0),
    SystemSpec(kind='nbody', n=3, d=2, masses=(1.0, 2.0, 0.5)),
])
def test_gradient_matches_autodiff(spec, rng):
    x = rng.standard_normal((5, spec.phase_dim))
    node = gc.variable(x)
    (auto,) = gc.backward(hamiltonian_field(spec)(node).sum(), [node])
    np.testing.assert_allclose(ground_truth_gradient(spec, x), auto, rtol=1e-9, atol=1e-12)
    np.testing.assert_allclose(
        hamiltonian_field(spec)(gc.constant(x)).value,
        ground_truth_hamiltonian(spec, x),
        rtol=1e-12,
    )


def test_vector_field_of_oscillator(sho):
    field = hamiltonian_vector_field(hamiltonian_field(sho), [1.0, 2.0])
    np.testing.assert_allclose(field, [2.0, -1.0])


def test_poisson_bracket(sho, nharm2, rng):
    h = hamiltonian_field(sho)
    assert poisson_bracket(h, h, [0.3, -0.7]) == pytest.approx(0.0, abs=1e-12)

    def q_coord(x):
        return x[..., 0]

    def p_coord(x):
        return x[..., 1]

    assert poisson_bracket(q_coord, p_coord, [0.1, 0.2]) == pytest.approx(1.0)

    def angular(x):
        # q_0 p_1 - q_1 p_0
        return x[..., 0] * x[..., 3] - x[..., 1] * x[..., 2]

    points = rng.standard_normal((4, 4))
    np.testing.assert_allclose(
        poisson_bracket(hamiltonian_field(nharm2), angular, points), 0.0, atol=1e-12
    )


def _quadratic(rng, m=4):
    return QuadraticObservable(rng.standard_normal((m, m)), rng.standard_normal(m))


def _cubic(x):
    return x[..., 0] * x[..., 1] * x[..., 3] + x[..., 2] * x[..., 2] * x[..., 2]


def test_bracket_is_bilinear_and_antisymmetric(rng):
    c1, c2 = _quadratic(rng), _quadratic(rng)
    points = rng.standard_normal((5, 4))
    a, b = 1.7, -0.4
    mixed = (c1 * a + c2 * b).field()
    np.testing.assert_allclose(
        poisson_bracket(mixed, _cubic, points),
        a * poisson_bracket(c1.field(), _cubic, points)
        + b * poisson_bracket(c2.field(), _cubic, points),
        rtol=1e-9,
        atol=1e-9,
    )
    np.testing.assert_allclose(
        poisson_bracket(_cubic, mixed, points),
        -poisson_bracket(mixed, _cubic, points),
        rtol=1e-9,
        atol=1e-9,
    )


def test_bracket_leibniz_law(rng):
    c1, c2, h = _quadratic(rng), _quadratic(rng), _quadratic(rng)
    points = rng.standard_normal((5, 4))

    def product(x):
        return c1.field()(x) * c2.field()(x)

    expected = poisson_bracket(c1.field(), h.field(), points) * value(c2, points) + value(
        c1, points
    ) * poisson_bracket(c2.field(), h.field(), points)
    np.testing.assert_allclose(
        poisson_bracket(product, h.field(), points), expected, rtol=1e-8, atol=1e-8
    )


def test_bracket_jacobi_identity(rng):
    c1, c2, c3 = _quadratic(rng), _quadratic(rng), _quadratic(rng)
    points = rng.standard_normal((5, 4))

    def nested(first, second, third):
        # the constant part of {second, third} has no bracket
        inner, _ = quadratic_bracket(second, third)
        return poisson_bracket(first.field(), inner.field(), points)

    total = nested(c1, c2, c3) + nested(c2, c3, c1) + nested(c3, c1, c2)
    scale = np.max(np.abs(nested(c1, c2, c3)))
    np.testing.assert_allclose(total, 0.0, atol=1e-7 * max(1.0, scale))


def test_rk4_rotation(sho):
    states = rk4_simulate(sho, [1.0, 0.0], dt=np.pi / 2, steps=4)
    np.testing.assert_allclose(states[0], [0.0, -1.0], atol=1e-8)
    np.testing.assert_allclose(states[-1], [1.0, 0.0], atol=1e-8)


def test_rk4_conserves_energy(nbody3):
    x0 = np.array([0.0, 0.0, 3.0, 0.0, 0.0, 3.0, 0.1, 0.2, -0.3, 0.1, 0.2, -0.3])
    states = rk4_simulate(nbody3, x0, dt=0.3, steps=5)
    energy = ground_truth_hamiltonian(nbody3, states)
    start = ground_truth_hamiltonian(nbody3, x0)
    assert np.max(np.abs(energy - start)) < 1e-4 * max(1.0, abs(start))


def test_rk4_batch_shape(sho, rng):
    out = rk4_simulate(sho, rng.standard_normal((3, 2)), dt=0.1, steps=2, substeps=3)
    assert out.shape == (3, 2, 2)


def test_rk4_preconditions(sho):
    with pytest.raises(PreconditionError):
        rk4_simulate(sho, [1.0, 0.0], dt=0.1, steps=0)
    with pytest.raises(PreconditionError):
        rk4_simulate(sho, [1.0, 0.0], dt=0.0, steps=1)
    with pytest.raises(PreconditionError):
        rk4_simulate(sho, [1.0, 0.0], dt=0.1, steps=1, substeps=0)


def test_rk4_divergence_reports_rows():
    def blow_up(state):
        return state**2

    with pytest.raises(DivergenceError) as info:
        rk4_integrate(blow_up, [[0.0, 0.0], [5.0, 5.0]], dt=1.0, steps=3, substeps=1)
    assert info.value.rows == [1]
    assert info.value.step >= 1


def test_recipe_defaults(sho, nbody3):
    assert (recipe_for(sho).n_traj, recipe_for(sho).points_per_traj) == (7, 4)
    assert recipe_for(sho).dt == 0.2
    test = recipe_for(nbody3, 'test')
    assert (test.n_traj, test.points_per_traj, test.dt) == (100, 21, 0.3)
    assert recipe_for(nbody3, 'moved').offset == 5.0
    assert recipe_for(nbody3, 'wider').shift_std == 6.0
    with pytest.raises(PreconditionError):
        recipe_for(sho, 'moved')
    with pytest.raises(PreconditionError):
        DataRecipe(n_traj=1, points_per_traj=1, dt=0.1)


def test_sho_training_split(sho_data):
    assert sho_data.n_pairs == 21
    assert sho_data.phase_dim == 2
    assert len(sho_data.trajectory_ids()) == 7
    # consecutive pairs chain within a trajectory
    first = sho_data.trajectories()[0]
    assert first.shape == (4, 2)
    np.testing.assert_array_equal(sho_data.x_tp[0], sho_data.x_t[1])


def test_pairs_follow_the_flow(sho_data, sho):
    for x_t, x_tp in zip(sho_data.x_t[:5], sho_data.x_tp[:5]):
        np.testing.assert_allclose(
            rk4_simulate(sho, x_t, sho_data.dt, 1)[0], x_tp, atol=1e-9
        )


def test_sampling_is_deterministic(sho):
    recipe = recipe_for(sho, 'test', n_traj=3, points_per_traj=3)
    a = sample_dataset(sho, recipe, seed=5)
    b = sample_dataset(sho, recipe, seed=5)
    c = sample_dataset(sho, recipe, seed=6)
    np.testing.assert_array_equal(a.x_t, b.x_t)
    assert not np.allclose(a.x_t, c.x_t)


def test_moved_split_is_translated(nbody3):
    recipe = recipe_for(nbody3, 'moved', n_traj=50, points_per_traj=2)
    data = sample_dataset(nbody3, recipe, seed=0)
    positions = data.x_t[:, :6].reshape(-1, 3, 2)
    assert np.mean(positions) > 3.0


def test_dataset_subset_and_io(sho_data, tmpdir):
    part = sho_data.subset([0, 2])
    assert part.n_pairs == 6
    assert set(part.traj) == {0, 2}
    path = str(tmpdir.join('data.json'))
    sho_data.save(path)
    loaded = Dataset.load(path)
    np.testing.assert_array_equal(loaded.x_t, sho_data.x_t)
    np.testing.assert_array_equal(loaded.traj, sho_data.traj)
    assert loaded.spec == sho_data.spec
    assert loaded.recipe == sho_data.recipe
    with open(path) as fid:
        assert fid.read().startswith('{\n "schema_version": "1"')


def _nbody_invariants(states):
    pos = states[..., :6].reshape(states.shape[:-1] + (3, 2))
    mom = states[..., 6:].reshape(states.shape[:-1] + (3, 2))
    total = mom.sum(axis=-2)
    angular = np.sum(pos[..., 0] * mom[..., 1] - pos[..., 1] * mom[..., 0], axis=-1)
    return total, angular


def test_nbody_default_step_holds_the_invariants(nbody3):
    assert max_internal_step(nbody3) == 0.001
    x0 = np.array([0.0, 0.0, 3.0, 0.0, 0.0, 3.0, 0.1, 0.2, -0.3, 0.1, 0.2, -0.3])
    states = rk4_simulate(nbody3, x0, dt=0.1, steps=20)
    drift = energy_drift(nbody3, x0[None], states[None])[0]
    assert drift < 1e-6
    total, angular = _nbody_invariants(states)
    start_total, start_angular = _nbody_invariants(x0)
    np.testing.assert_allclose(total, np.broadcast_to(start_total, total.shape), atol=1e-9)
    np.testing.assert_allclose(angular, start_angular, atol=1e-6)


def test_energy_drift_of_an_exact_orbit(sho):
    t = np.linspace(0.1, 1.0, 10)
    states = np.stack([np.cos(t), -np.sin(t)], axis=1)
    assert energy_drift(sho, [[1.0, 0.0]], states[None])[0] == pytest.approx(0.0, abs=1e-15)
    scaled = 3.0 * states
    assert energy_drift(sho, [[1.0, 0.0]], scaled[None])[0] == pytest.approx(4.0)


def test_sampling_records_substeps(sho, nbody3):
    data = sample_dataset(nbody3, recipe_for(nbody3, 'train', n_traj=4, points_per_traj=8), 0)
    assert data.recipe.substeps >= 300
    for traj in data.trajectories():
        assert energy_drift(nbody3, traj[:1], traj[None, 1:])[0] <= ENERGY_DRIFT_TOL
    assert sample_dataset(sho, recipe_for(sho), 0).recipe.substeps == 20
    fixed = sample_dataset(sho, recipe_for(sho, substeps=5), 0)
    assert fixed.recipe.substeps == 5


def test_sampling_refines_until_energy_holds(sho, monkeypatch, caplog):
    monkeypatch.setattr(dynamics, 'ENERGY_DRIFT_TOL', 0.0)
    with caplog.at_level('INFO', logger='noetherrazor'):
        data = sample_dataset(sho, recipe_for(sho), 0)
    assert data.recipe.substeps == 20 * 2 ** dynamics.DRIFT_REFINEMENTS
    assert 'doubling RK4 substeps' in caplog.text
    assert 'still above' in caplog.text
