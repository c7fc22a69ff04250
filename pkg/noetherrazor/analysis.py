"""
This module contains the symmetry identification of trained banks.

Learned observables are mapped to their generators, flattened and stacked
into one matrix whose singular values count the independent symmetries. The
right singular vectors are compared with the generators of the known
conserved quantities: the norm of their projection onto the ground-truth row
space is the parallelness, 1 for a vector inside that space and 0 for one
orthogonal to it.

Examples
--------
>>> from noetherrazor.analysis import ground_truth_bank, parallelness, spectrum
>>> from noetherrazor.dynamics import SystemSpec
>>> truth = ground_truth_bank(SystemSpec(kind="nharm", n=2))
>>> len(truth.labels)
4
>>> [round(v, 6) for v in parallelness(truth, truth, top=4)]
[1.0, 1.0, 1.0, 1.0]
"""
import warnings
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np  # type: ignore

from . import gradcore as gc
from .conserved import QuadraticObservable, SymmetryBank, generator
from .dynamics import SystemSpec
from .errors import PreconditionError, ShapeError
from .utils import LOG, _check_type, write_csv, write_json

ACTIVE_THRESHOLD = 0.05
RANK_TOLERANCE = 1e-10
_AXES = "xyzw"


@dataclass
class GeneratorBank:
    """Flattened ``(M + 1)^2`` generator rows with one label per row."""

    rows: np.ndarray
    labels: List[str]
    notes: List[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        """Validate the rows."""
        self.rows = np.asarray(self.rows, dtype=np.float64)
        if self.rows.ndim != 2:
            raise ShapeError(f"Generator rows must be a matrix, got {self.rows.shape}.")
        side = int(round(np.sqrt(self.rows.shape[1])))
        if side * side != self.rows.shape[1]:
            raise ShapeError(f"Row length {self.rows.shape[1]} is not a square.")
        if len(self.labels) != self.rows.shape[0]:
            raise ShapeError(
                f"Got {len(self.labels)} labels for {self.rows.shape[0]} rows."
            )

    def __len__(self) -> int:
        """Return the number of rows."""
        return int(self.rows.shape[0])

    @property
    def phase_dim(self) -> int:
        """Return ``M``."""
        return int(round(np.sqrt(self.rows.shape[1]))) - 1

    def matrices(self) -> np.ndarray:
        """Return the rows as ``(L, M + 1, M + 1)`` matrices."""
        side = self.phase_dim + 1
        return self.rows.reshape(-1, side, side)


def _rows(quantities: Sequence[QuadraticObservable]) -> np.ndarray:
    return np.stack([generator(c).matrix.reshape(-1) for c in quantities])


# ---------------------------------------------------------------------------
# ground truth
# ---------------------------------------------------------------------------


def _oscillator_quantities(spec: SystemSpec) -> Tuple[List[str], List[QuadraticObservable]]:
    n = spec.n
    masses = spec.mass_array
    if np.ptp(masses) != 0:
        raise PreconditionError(
            "Ground-truth quantities of coupled oscillators need equal masses."
        )
    inv_mass = 1.0 / masses[0]
    labels, out = [], []
    for i in range(n):
        mat = np.zeros((2 * n, 2 * n))
        mat[i, i] = spec.k
        mat[n + i, n + i] = inv_mass
        labels.append("H" if spec.kind == "sho" else f"H_{i}")
        out.append(QuadraticObservable(mat))
    for i in range(n):
        for j in range(i + 1, n):
            # q_i p_j - q_j p_i
            mat = np.zeros((2 * n, 2 * n))
            mat[i, n + j] = mat[n + j, i] = 1.0
            mat[j, n + i] = mat[n + i, j] = -1.0
            labels.append(f"R_{i}{j}")
            out.append(QuadraticObservable(mat))
    for i in range(n):
        for j in range(i + 1, n):
            # k q_i q_j + p_i p_j / m
            mat = np.zeros((2 * n, 2 * n))
            mat[i, j] = mat[j, i] = spec.k
            mat[n + i, n + j] = mat[n + j, n + i] = inv_mass
            labels.append(f"F_{i}{j}")
            out.append(QuadraticObservable(mat))
    return labels, out


def _nbody_quantities(spec: SystemSpec) -> Tuple[List[str], List[QuadraticObservable]]:
    n, d = spec.n, spec.d
    m = spec.phase_dim
    half = n * d
    masses = spec.mass_array
    com = masses / (masses.sum() * n)

    def _q(i: int, a: int) -> int:
        return i * d + a

    def _p(i: int, a: int) -> int:
        return half + i * d + a

    labels, out = [], []
    for a in range(d):
        vec = np.zeros(m)
        vec[[_p(i, a) for i in range(n)]] = 1.0
        labels.append(f"T_{_AXES[a]}")
        out.append(QuadraticObservable(np.zeros((m, m)), vec))
    for a in range(d):
        for c in range(a + 1, d):
            plane = _AXES[a] + _AXES[c]
            absolute = np.zeros((m, m))
            for i in range(n):
                absolute[_q(i, a), _p(i, c)] = absolute[_p(i, c), _q(i, a)] = 1.0
                absolute[_q(i, c), _p(i, a)] = absolute[_p(i, a), _q(i, c)] = -1.0
            labels.append("R_abs" if d == 2 else f"R_abs_{plane}")
            out.append(QuadraticObservable(absolute))
            centre = np.zeros((m, m))
            for i in range(n):
                for j in range(n):
                    centre[_q(i, a), _p(j, c)] += com[i]
                    centre[_p(j, c), _q(i, a)] += com[i]
                    centre[_q(i, c), _p(j, a)] -= com[i]
                    centre[_p(j, a), _q(i, c)] -= com[i]
            labels.append("R_com" if d == 2 else f"R_com_{plane}")
            out.append(QuadraticObservable(centre))
    for a in range(d):
        mat = np.zeros((m, m))
        for i in range(n):
            for j in range(n):
                mat[_p(i, a), _p(j, a)] = 2.0
        labels.append(f"P_{_AXES[a]}")
        out.append(QuadraticObservable(mat))
    for a in range(d):
        for c in range(a + 1, d):
            mat = np.zeros((m, m))
            for i in range(n):
                for j in range(n):
                    mat[_p(i, a), _p(j, c)] = mat[_p(j, c), _p(i, a)] = 1.0
            labels.append(f"Q_{_AXES[a]}{_AXES[c]}")
            out.append(QuadraticObservable(mat))
    return labels, out


def ground_truth_quantities(spec: SystemSpec) -> Tuple[List[str], List[QuadraticObservable]]:
    """Return labels and quadratic observables of the known conserved quantities.

    The simple oscillator has its energy ``H``. ``n`` coupled oscillators of
    equal mass have the energies ``H_i``, the angular momenta ``R_ij`` and the
    cross terms ``F_ij``, ``n^2`` in total. The n-body system has the total
    momenta ``T``, the summed angular momentum ``R_abs``, the angular momentum
    of the centre of mass ``R_com`` and the products ``P = T_a^2`` and
    ``Q = T_a T_c``; seven in the plane. The relative angular momentum is a
    combination of the others and is left out.
    """
    _check_type(spec, "spec", [SystemSpec])
    if spec.kind == "nbody":
        return _nbody_quantities(spec)
    return _oscillator_quantities(spec)


def ground_truth_bank(spec: SystemSpec) -> GeneratorBank:
    """Return the generator rows of the known conserved quantities of ``spec``."""
    labels, quantities = ground_truth_quantities(spec)
    return GeneratorBank(_rows(quantities), labels)


# ---------------------------------------------------------------------------
# learned banks
# ---------------------------------------------------------------------------


def stack_learned(bank: SymmetryBank) -> GeneratorBank:
    """Stack the learned generators as unit-norm rows.

    Observables whose generator vanishes are dropped with a warning and a
    note on the returned bank.
    """
    _check_type(bank, "bank", [SymmetryBank])
    side = bank.phase_dim + 1
    if bank.n_quantities == 0:
        return GeneratorBank(np.zeros((0, side * side)), [], ["no bank"])
    rows = bank.generators().numpy().reshape(bank.n_quantities, -1)
    norms = np.linalg.norm(rows, axis=1)
    keep = norms > 0
    notes = []
    if not np.all(keep):
        dropped = np.flatnonzero(~keep).tolist()
        notes.append(f"dropped zero generators {dropped}")
        warnings.warn(f"Learned generators {dropped} are zero and were dropped.")
    labels = [f"C_{i}" for i in np.flatnonzero(keep)]
    return GeneratorBank(rows[keep] / norms[keep, None], labels, notes)


def _right_vectors(g: GeneratorBank) -> Tuple[np.ndarray, np.ndarray]:
    if len(g) == 0:
        raise PreconditionError("Cannot take the spectrum of an empty generator bank.")
    _, sigma, vecs = gc.svd(g.rows)
    return sigma, vecs.T


def spectrum(g: GeneratorBank) -> np.ndarray:
    """Return the singular values of the stacked rows in descending order."""
    _check_type(g, "g", [GeneratorBank])
    return _right_vectors(g)[0]


def _projector_basis(truth: GeneratorBank) -> np.ndarray:
    sigma, vecs = _right_vectors(truth)
    rank = int(np.sum(sigma > RANK_TOLERANCE * max(sigma[0], 1.0)))
    if rank < len(truth):
        warnings.warn(
            f"Ground-truth rows have rank {rank} < {len(truth)}; projecting on "
            "the detected row space."
        )
    return vecs[:rank]


def parallelness(g: GeneratorBank, truth: GeneratorBank, top: Optional[int] = None) -> List[float]:
    """Norm of the projection of the leading right singular vectors of ``g`` on ``truth``.

    Parameters
    ----------
    g : GeneratorBank
        Learned (or any) generator rows.

    truth : GeneratorBank
        Rows spanning the reference subspace.

    top : int, optional
        Number of leading singular vectors, all of them by default.

    Returns
    -------
    list of float
        One value in ``[0, 1]`` per singular vector.
    """
    _check_type(g, "g", [GeneratorBank])
    _check_type(truth, "truth", [GeneratorBank])
    if g.rows.shape[1] != truth.rows.shape[1]:
        raise ShapeError(
            f"Generator rows of length {g.rows.shape[1]} and {truth.rows.shape[1]} differ."
        )
    _, vecs = _right_vectors(g)
    top = vecs.shape[0] if top is None else int(top)
    if not 0 <= top <= vecs.shape[0]:
        raise PreconditionError(
            f"``top`` must lie in [0, {vecs.shape[0]}], got {top}."
        )
    basis = _projector_basis(truth)
    norms = np.linalg.norm(vecs[:top] @ basis.T, axis=1)
    return [float(v) for v in np.clip(norms, 0.0, 1.0)]


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


@dataclass
class AnalysisReport:
    """Spectrum and parallelness of a learned bank against a ground truth."""

    system: str
    singular_values: List[float]
    parallelness: List[float]
    threshold: float
    truth_dim: int
    truth_labels: List[str]
    generators: List[List[List[float]]] = field(default_factory=list)
    notes: List[str] = field(default_factory=list)

    @property
    def active_count(self) -> int:
        """Return the number of singular values above the threshold."""
        return int(sum(v > self.threshold for v in self.singular_values))

    def to_dict(self) -> Dict[str, Any]:
        """Return the report as plain python."""
        return {
            "system": self.system,
            "singular_values": self.singular_values,
            "parallelness": self.parallelness,
            "threshold": self.threshold,
            "active_count": self.active_count,
            "truth_dim": self.truth_dim,
            "truth_labels": self.truth_labels,
            "generators": self.generators,
            "notes": self.notes,
        }

    def rows(self) -> List[Tuple[int, float, float]]:
        """Return ``(index, singular value, parallelness)`` per singular vector."""
        return [
            (i, s, p)
            for i, (s, p) in enumerate(zip(self.singular_values, self.parallelness))
        ]

    def save(
        self, path: str, config: Optional[Dict[str, Any]] = None, seed: Optional[int] = None
    ) -> None:
        """Write the report as JSON, with the run configuration and seed echoed."""
        write_json(path, {**self.to_dict(), "seed": seed, "config": config or {}})

    def save_csv(self, path: str, metadata: Optional[Dict[str, Any]] = None) -> None:
        """Write ``index,singular_value,parallelness`` rows, ``metadata`` to the sidecar."""
        write_csv(path, ("index", "singular_value", "parallelness"), self.rows(), metadata)


def analyze(
    bank: SymmetryBank, spec: SystemSpec, threshold: float = ACTIVE_THRESHOLD
) -> AnalysisReport:
    """Compare a learned bank with the known conserved quantities of ``spec``."""
    _check_type(bank, "bank", [SymmetryBank])
    truth = ground_truth_bank(spec)
    if truth.phase_dim != bank.phase_dim:
        raise ShapeError(
            f"Bank phase dimension {bank.phase_dim} does not match {spec.label} "
            f"({truth.phase_dim})."
        )
    learned = stack_learned(bank)
    report = AnalysisReport(
        system=spec.label,
        singular_values=[],
        parallelness=[],
        threshold=threshold,
        truth_dim=len(truth),
        truth_labels=truth.labels,
        generators=bank.generators().numpy().tolist() if bank.n_quantities else [],
        notes=list(learned.notes),
    )
    if len(learned) == 0:
        return report
    report.singular_values = [float(v) for v in spectrum(learned)]
    report.parallelness = parallelness(learned, truth)
    LOG.debug(
        "%s: %d active generators, ground truth has %d",
        spec.label,
        report.active_count,
        report.truth_dim,
    )
    return report


def default_bank_size(spec: SystemSpec) -> int:
    """Return the default number of learned observables for ``spec``.

    Three for the simple oscillator, otherwise three more than the number of
    known conserved quantities.
    """
    if spec.kind == "sho":
        return 3
    return len(ground_truth_quantities(spec)[0]) + 3
