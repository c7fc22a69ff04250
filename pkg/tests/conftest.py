import importlib
import sys

import numpy as np
import pytest

import noetherrazor
from noetherrazor.conserved import QuadraticObservable, SymmetryBank
from noetherrazor.dynamics import SystemSpec, recipe_for, sample_dataset
from noetherrazor.model import MLPArchitecture
from noetherrazor.utils import LOG
from noetherrazor.variational import LayerPosterior, TrainConfig


def pytest_configure(config):
    """Configure pytest options."""
    # Fixtures
    for fixture in ('restore_log_level',):
        config.addinivalue_line('usefixtures', fixture)
    # Markers
    for marker in ('slow',):
        config.addinivalue_line('markers', marker)


def _check_pyvista_installed():
    try:
        import pyvista  # noqa
    except Exception:
        return False
    else:
        return True


@pytest.fixture(autouse=True)
def restore_log_level():
    """Leave the package logger at the level it was found."""
    level = LOG.level
    yield
    LOG.setLevel(level)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


@pytest.fixture()
def sho():
    return SystemSpec(kind='sho')


@pytest.fixture()
def nharm2():
    return SystemSpec(kind='nharm', n=2)


@pytest.fixture()
def nbody3():
    return SystemSpec(kind='nbody', n=3, d=2)


@pytest.fixture()
def sho_data(sho):
    """The 7 x 4 oscillator training split."""
    return sample_dataset(sho, recipe_for(sho, 'train'), seed=0)


@pytest.fixture()
def tiny_arch():
    return MLPArchitecture(input_dim=2, hidden=(6,), alpha=1.0)


@pytest.fixture()
def tiny_posteriors(tiny_arch, rng):
    return [
        LayerPosterior.initialize(out, inp, rng, diag=0.05)
        for out, inp in tiny_arch.layer_shapes
    ]


@pytest.fixture()
def energy_bank():
    """Frozen bank holding the oscillator energy."""
    return SymmetryBank.from_quantities([QuadraticObservable(np.eye(2))])


@pytest.fixture()
def tiny_config():
    return TrainConfig(
        mode='learn', k=1, n_tau=4, n_weight_samples=2, batch_traj=None,
        epochs=2, n_steps=2, sigma2_policy='fixed', sigma2=1e-2, seed=0,
        eval_tau=4,
    )


@pytest.fixture()
def no_pyvista(monkeypatch):
    """Hide pyvista from the package."""
    need_reload = _check_pyvista_installed()
    monkeypatch.setitem(sys.modules, 'pyvista', None)
    importlib.reload(noetherrazor)
    yield
    monkeypatch.undo()
    if need_reload:
        importlib.reload(noetherrazor)
