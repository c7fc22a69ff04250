"""
This module contains the export of energy fields on a phase-space grid.

The grid of a two-dimensional phase space is written as ``q,p,H`` rows for
any plotting tool, and optionally as a VTK structured grid through
``pyvista``, which is only needed for that export.
"""
from typing import Any, Dict, Optional, Tuple

import numpy as np  # type: ignore

from . import gradcore as gc
from .conserved import sample_tau, symmetrize
from .dynamics import SystemSpec, ground_truth_hamiltonian
from .errors import ShapeError
from .model import mlp_field
from .utils import LOG, make_rng, write_csv
from .variational import Checkpoint

FieldGrid = Tuple[np.ndarray, np.ndarray, np.ndarray]


def _grid(lo: float, hi: float, resolution: int) -> Tuple[np.ndarray, np.ndarray]:
    axis = np.linspace(lo, hi, resolution)
    q, p = np.meshgrid(axis, axis, indexing="ij")
    return q, p


def _check_plane(m: int) -> None:
    if m != 2:
        raise ShapeError(
            f"field export requires a 2-dimensional phase space, got M={m}"
        )


def learned_field_grid(
    checkpoint: Checkpoint,
    lo: float,
    hi: float,
    resolution: int,
    n_tau: int = 200,
    seed: Any = None,
) -> FieldGrid:
    """Evaluate the symmetrised mean-weight energy on a ``resolution`` square grid.

    Returns ``(q, p, H)``, each of shape ``(resolution, resolution)``.
    """
    _check_plane(checkpoint.arch.input_dim)
    q, p = _grid(lo, hi, resolution)
    points = np.stack([q.ravel(), p.ravel()], axis=1)
    energy = mlp_field(checkpoint.mean_parameters())
    bank = checkpoint.bank
    if bank.n_quantities:
        seed = checkpoint.config.seed if seed is None else seed
        taus = sample_tau(checkpoint.config.measure(), bank.n_quantities, n_tau, make_rng(seed))
        values = symmetrize(energy, bank, points, taus).numpy()
    else:
        values = energy(gc.constant(points)).numpy()
    return q, p, np.asarray(values).reshape(q.shape)


def analytic_field_grid(spec: SystemSpec, lo: float, hi: float, resolution: int) -> FieldGrid:
    """Evaluate the ground-truth energy of a one-degree-of-freedom system on a grid."""
    _check_plane(spec.phase_dim)
    q, p = _grid(lo, hi, resolution)
    values = ground_truth_hamiltonian(spec, np.stack([q.ravel(), p.ravel()], axis=1))
    return q, p, np.asarray(values).reshape(q.shape)


def write_field_csv(
    path: str, grid: FieldGrid, metadata: Optional[Dict[str, Any]] = None
) -> None:
    """Write the grid as ``q,p,H`` rows, ``metadata`` to the JSON sidecar."""
    q, p, h = grid
    write_csv(path, ("q", "p", "H"), zip(q.ravel(), p.ravel(), h.ravel()), metadata)


def to_structured_grid(grid: FieldGrid) -> Any:
    """Return the grid as a ``pyvista.StructuredGrid`` with the energy as point data ``H``."""
    try:
        import pyvista  # pylint: disable=import-outside-toplevel
    except ImportError as exc:
        raise RuntimeError(f"VTK export requires pyvista, got: {exc}") from exc

    q, p, h = grid
    mesh = pyvista.StructuredGrid(q, p, np.zeros_like(q))
    mesh.point_data["H"] = h.ravel(order="F")
    return mesh


def write_vtk(path: str, grid: FieldGrid) -> None:
    """Write the grid as a VTK structured grid file."""
    LOG.debug("writing VTK grid to %s", path)
    to_structured_grid(grid).save(path)
