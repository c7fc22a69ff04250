"""Hamiltonian neural networks that learn their own conserved quantities."""

try:
    from importlib.metadata import version

    __version__ = version("noetherrazor")
except Exception:  # pragma: no cover # pylint: disable=broad-exception-caught
    try:
        from ._version import __version__
    except ImportError:
        __version__ = '0.0.0'

from .analysis import AnalysisReport, GeneratorBank, analyze, ground_truth_bank
from .config import RunConfig
from .conserved import QuadraticObservable, SymmetryBank, flow, symmetrize
from .dynamics import Dataset, SystemSpec, recipe_for, rk4_simulate, sample_dataset
from .errors import (
    DivergenceError,
    DomainError,
    NoetherRazorError,
    NumericalError,
    PreconditionError,
    ShapeError,
    TrainingAborted,
)
from .model import MLPArchitecture, MLPParameters, rollout_mean
from .variational import Checkpoint, LayerPosterior, TrainConfig, evaluate, train

try:
    import pyvista  # noqa
except Exception as exc:  # pragma: no cover # pylint: disable=broad-except
    _exc_msg = exc

    def write_vtk(*args, **kwargs):  # type: ignore
        """Handle the missing pyvista for the VTK export."""
        raise RuntimeError(f"VTK export requires pyvista, got: {_exc_msg}")

else:
    from .export import write_vtk


__all__ = [
    "__version__",
    "AnalysisReport",
    "Checkpoint",
    "Dataset",
    "DivergenceError",
    "DomainError",
    "GeneratorBank",
    "LayerPosterior",
    "MLPArchitecture",
    "MLPParameters",
    "NoetherRazorError",
    "NumericalError",
    "PreconditionError",
    "QuadraticObservable",
    "RunConfig",
    "ShapeError",
    "SymmetryBank",
    "SystemSpec",
    "TrainConfig",
    "TrainingAborted",
    "analyze",
    "evaluate",
    "flow",
    "ground_truth_bank",
    "recipe_for",
    "rk4_simulate",
    "sample_dataset",
    "symmetrize",
    "train",
    "write_vtk",
]
