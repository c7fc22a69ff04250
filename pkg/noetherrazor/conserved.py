"""
This module contains quadratic conserved quantities and their symmetries.

A quadratic observable ``C(x) = x^T A x / 2 + b^T x`` generates the affine
flow ``dx/dtau = J A x + J b``. On homogeneous coordinates ``(x, 1)`` the flow
is the matrix exponential of the generator

.. code-block:: none

    g = [[J A, J b],
         [0,   0  ]]

so a bank of ``K`` observables and a vector of symmetry times ``tau`` act on
phase space through ``expm(sum_k tau_k g_k)``. Everything here is built on
:mod:`noetherrazor.gradcore`, so the symmetrised energy is differentiable in
the phase point, the bank and whatever parameters the energy carries.
"""
import math
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np  # type: ignore

from . import gradcore as gc
from .dynamics import symplectic_form
from .errors import DomainError, PreconditionError, ShapeError
from .utils import LOG, _check_type, make_rng

TAU_MEASURES = ("normal", "uniform")
ETA_INIT_STD = 0.01

ScalarField = Callable[[gc.Node], gc.Node]


class QuadraticObservable:
    """Quadratic observable ``C(x) = x^T A x / 2 + b^T x``.

    Parameters
    ----------
    A : array_like
        ``(M, M)`` matrix; only its symmetric part is kept.

    b : array_like, optional
        Linear coefficients of length ``M``, zero by default.
    """

    def __init__(self, A: Any, b: Optional[Any] = None) -> None:  # pylint: disable=invalid-name
        """Initialize the observable."""
        mat = np.asarray(A, dtype=np.float64)
        if mat.ndim != 2 or mat.shape[0] != mat.shape[1] or mat.shape[0] % 2:
            raise ShapeError(f"``A`` must be square of even size, got {mat.shape}.")
        vec = np.zeros(mat.shape[0]) if b is None else np.asarray(b, dtype=np.float64)
        if vec.shape != (mat.shape[0],):
            raise ShapeError(f"``b`` must have shape ({mat.shape[0]},), got {vec.shape}.")
        self._A = 0.5 * (mat + mat.T)
        self._A.flags.writeable = False
        self._b = vec.copy()
        self._b.flags.writeable = False

    @property
    def A(self) -> np.ndarray:  # pylint: disable=invalid-name
        """Return the symmetric matrix."""
        return self._A

    @property
    def b(self) -> np.ndarray:
        """Return the linear coefficients."""
        return self._b

    @property
    def phase_dim(self) -> int:
        """Return ``M``."""
        return int(self._b.shape[0])

    def __repr__(self) -> str:
        """Return a short description."""
        return f"QuadraticObservable(M={self.phase_dim})"

    def __add__(self, other: "QuadraticObservable") -> "QuadraticObservable":
        return QuadraticObservable(self.A + other.A, self.b + other.b)

    def __mul__(self, scale: float) -> "QuadraticObservable":
        return QuadraticObservable(self.A * scale, self.b * scale)

    __rmul__ = __mul__

    def field(self) -> ScalarField:
        """Return the observable as a differentiable scalar field on rows."""
        mat, vec = gc.constant(self.A), gc.constant(self.b)

        def _value(x: gc.Node) -> gc.Node:
            rows = x.reshape((1, -1)) if x.ndim == 1 else x
            out = ((rows @ mat) * rows).sum(axis=-1) * 0.5 + (rows * vec).sum(axis=-1)
            return out.reshape(()) if x.ndim == 1 else out

        return _value

    def is_zero(self) -> bool:
        """Return whether ``A`` and ``b`` vanish."""
        return not (np.any(self.A) or np.any(self.b))


@dataclass(frozen=True)
class HomogeneousGenerator:
    """The ``(M + 1, M + 1)`` matrix ``[[J A, J b], [0, 0]]``."""

    matrix: np.ndarray

    @property
    def phase_dim(self) -> int:
        """Return ``M``."""
        return int(self.matrix.shape[0] - 1)

    def apply(self, x: Any) -> np.ndarray:
        """Apply the generator to ``(x, 1)`` and return all ``M + 1`` entries."""
        arr = np.asarray(x, dtype=np.float64)
        return self.matrix[:, :-1] @ arr + self.matrix[:, -1]


def _check_dim(c: QuadraticObservable, x: np.ndarray) -> None:
    if x.shape[-1] != c.phase_dim:
        raise ShapeError(
            f"Observable has phase dimension {c.phase_dim}, got points of shape {x.shape}."
        )


def value(c: QuadraticObservable, x: Any) -> Union[float, np.ndarray]:
    """Evaluate ``x^T A x / 2 + b^T x`` for a point or a batch of points."""
    _check_type(c, "c", [QuadraticObservable])
    arr = np.asarray(x, dtype=np.float64)
    _check_dim(c, arr)
    out = 0.5 * np.einsum("...i,ij,...j->...", arr, c.A, arr) + arr @ c.b
    if arr.ndim == 1:
        return float(out)
    return out


def _embed(m: int) -> Tuple[gc.Node, gc.Node]:
    # P maps R^M into the first M homogeneous coordinates, e picks the last one
    embed = np.zeros((m + 1, m))
    embed[:m, :m] = np.eye(m)
    last = np.zeros((1, m + 1))
    last[0, m] = 1.0
    return gc.constant(embed), gc.constant(last)


def generator_matrices(a_sym: gc.Node, b: gc.Node) -> gc.Node:
    """Build stacked generators ``(K, M + 1, M + 1)`` from ``A (K, M, M)`` and ``b (K, M)``."""
    m = a_sym.shape[-1]
    jmat = gc.constant(symplectic_form(m))
    embed, last = _embed(m)
    ja = jmat @ a_sym
    jb = (b @ jmat.T).reshape(b.shape[:-1] + (m, 1))
    return embed @ ja @ embed.T + (embed @ jb) @ last


def generator(c: QuadraticObservable) -> HomogeneousGenerator:
    """Return the homogeneous generator of ``c``."""
    _check_type(c, "c", [QuadraticObservable])
    mat = generator_matrices(gc.constant(c.A[None]), gc.constant(c.b[None])).numpy()
    return HomogeneousGenerator(matrix=np.array(mat[0]))


class SymmetryBank:
    """Bank of ``K`` quadratic observables sharing one phase space.

    The bank stores an unconstrained ``raw_a`` of shape ``(K, M, M)`` whose
    symmetric part ``(raw_a + raw_a^T) / 2`` is the matrix of each observable,
    and ``b`` of shape ``(K, M)``. Both are :class:`~noetherrazor.gradcore.Node`
    objects; :meth:`as_variables` returns a copy that gradients flow to.

    Parameters
    ----------
    raw_a : array_like or Node
        Unconstrained matrices, shape ``(K, M, M)``.

    b : array_like or Node
        Linear coefficients, shape ``(K, M)``.

    trainable : bool
        Whether training may update the bank.
    """

    def __init__(self, raw_a: Any, b: Any, trainable: bool = True) -> None:
        """Initialize the bank."""
        self.raw_a = gc.as_node(raw_a)
        self.b = gc.as_node(b)
        if self.raw_a.ndim != 3 or self.raw_a.shape[1] != self.raw_a.shape[2]:
            raise ShapeError(f"``raw_a`` must be (K, M, M), got {self.raw_a.shape}.")
        if self.b.shape != self.raw_a.shape[:2]:
            raise ShapeError(
                f"``b`` must be {self.raw_a.shape[:2]}, got {self.b.shape}."
            )
        if self.raw_a.shape[1] % 2:
            raise ShapeError(f"Phase dimension must be even, got {self.raw_a.shape[1]}.")
        self.trainable = bool(trainable)

    def __repr__(self) -> str:
        """Return a short description."""
        return f"SymmetryBank(K={self.n_quantities}, M={self.phase_dim}, trainable={self.trainable})"

    @property
    def n_quantities(self) -> int:
        """Return ``K``."""
        return int(self.raw_a.shape[0])

    @property
    def phase_dim(self) -> int:
        """Return ``M``."""
        return int(self.raw_a.shape[1])

    @classmethod
    def empty(cls, m: int) -> "SymmetryBank":
        """Return the bank with no observables (no symmetrisation)."""
        return cls(np.zeros((0, m, m)), np.zeros((0, m)), trainable=False)

    @classmethod
    def initialize(
        cls, k: int, m: int, rng: Any = None, std: float = ETA_INIT_STD
    ) -> "SymmetryBank":
        """Draw ``K`` near-zero observables with entries of standard deviation ``std``."""
        if k < 0:
            raise PreconditionError(f"``k`` must be non-negative, got {k}.")
        rng = make_rng(rng)
        return cls(std * rng.standard_normal((k, m, m)), std * rng.standard_normal((k, m)))

    @classmethod
    def from_quantities(
        cls, quantities: Sequence[QuadraticObservable], trainable: bool = False
    ) -> "SymmetryBank":
        """Stack existing observables into a bank."""
        if not quantities:
            raise PreconditionError("Use SymmetryBank.empty for a bank without observables.")
        dims = {c.phase_dim for c in quantities}
        if len(dims) != 1:
            raise ShapeError(f"Observables have mixed phase dimensions {sorted(dims)}.")
        return cls(
            np.stack([c.A for c in quantities]),
            np.stack([c.b for c in quantities]),
            trainable=trainable,
        )

    def as_variables(self) -> "SymmetryBank":
        """Return a copy whose parameters are fresh differentiable leaves."""
        return SymmetryBank(
            gc.variable(self.raw_a.value), gc.variable(self.b.value), self.trainable
        )

    def frozen(self) -> "SymmetryBank":
        """Return a non-trainable copy with constant parameters."""
        return SymmetryBank(self.raw_a.value, self.b.value, trainable=False)

    def symmetric_a(self) -> gc.Node:
        """Return the symmetric matrices ``(K, M, M)``."""
        return (self.raw_a + self.raw_a.T) * 0.5

    def generators(self) -> gc.Node:
        """Return the stacked generators ``(K, M + 1, M + 1)``."""
        return generator_matrices(self.symmetric_a(), self.b)

    def quantities(self) -> List[QuadraticObservable]:
        """Return the observables as :class:`QuadraticObservable` objects."""
        a_sym = self.symmetric_a().numpy()
        return [QuadraticObservable(a_sym[i], self.b.value[i]) for i in range(self.n_quantities)]

    def to_dict(self) -> Dict[str, Any]:
        """Return the bank with each ``A`` as its row-major upper triangle."""
        rows, cols = np.triu_indices(self.phase_dim)
        a_sym = self.symmetric_a().numpy()
        return {
            "phase_dim": self.phase_dim,
            "trainable": self.trainable,
            "quantities": [
                {"A": a_sym[i][rows, cols].tolist(), "b": self.b.value[i].tolist()}
                for i in range(self.n_quantities)
            ],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SymmetryBank":
        """Build a bank from :meth:`to_dict` output."""
        m = int(data["phase_dim"])
        rows, cols = np.triu_indices(m)
        quantities = data.get("quantities", [])
        raw = np.zeros((len(quantities), m, m))
        vec = np.zeros((len(quantities), m))
        for i, entry in enumerate(quantities):
            raw[i][rows, cols] = entry["A"]
            raw[i][cols, rows] = entry["A"]
            vec[i] = entry["b"]
        return cls(raw, vec, trainable=bool(data.get("trainable", True)))


# ---------------------------------------------------------------------------
# flows
# ---------------------------------------------------------------------------


def orbit_transforms(bank: SymmetryBank, taus: Any) -> Tuple[gc.Node, gc.Node]:
    """Return the affine maps ``x -> L_s x + t_s`` for each row of ``taus``.

    Parameters
    ----------
    bank : SymmetryBank
        Bank with ``K >= 1`` observables.

    taus : array_like
        Symmetry times, shape ``(S, K)``.

    Returns
    -------
    L : Node
        Linear parts, shape ``(S, M, M)``.
    t : Node
        Offsets, shape ``(S, M)``.
    """
    tau = np.asarray(taus, dtype=np.float64)
    if tau.ndim != 2 or tau.shape[1] != bank.n_quantities:
        raise ShapeError(
            f"Expected symmetry times of shape (S, {bank.n_quantities}), got {tau.shape}."
        )
    m = bank.phase_dim
    gens = bank.generators()
    combined = (gens.reshape((1,) + gens.shape) * tau.reshape(tau.shape + (1, 1))).sum(axis=1)
    elements = gc.matexp(combined)
    return elements[:, :m, :m], elements[:, :m, m]


def apply_transforms(lin: gc.Node, offset: gc.Node, x: gc.Node) -> gc.Node:
    """Apply every map of :func:`orbit_transforms` to every row of ``x``.

    ``x`` of shape ``(P, M)`` gives a result of shape ``(S, P, M)``.
    """
    m = x.shape[-1]
    rows = x.reshape((1, -1, m))
    return rows @ lin.T + offset.reshape((offset.shape[0], 1, m))


def combined_flow(bank: SymmetryBank, tau: Any, x: Any) -> np.ndarray:
    """Flow ``x`` for unit time along ``sum_k tau_k C_k``.

    ``tau`` has shape ``(K,)`` and ``x`` shape ``(M,)`` or ``(P, M)``.
    """
    _check_type(bank, "bank", [SymmetryBank])
    arr = np.asarray(x, dtype=np.float64)
    vec = np.asarray(tau, dtype=np.float64).reshape(-1)
    if vec.shape[0] != bank.n_quantities:
        raise ShapeError(
            f"Expected {bank.n_quantities} symmetry times, got {vec.shape[0]}."
        )
    if arr.shape[-1] != bank.phase_dim:
        raise ShapeError(
            f"Bank has phase dimension {bank.phase_dim}, got points of shape {arr.shape}."
        )
    if bank.n_quantities == 0:
        return arr.copy()
    lin, offset = orbit_transforms(bank, vec[None, :])
    out = apply_transforms(lin, offset, gc.constant(arr.reshape(-1, bank.phase_dim)))
    return np.array(out.numpy()[0].reshape(arr.shape))


def flow(c: QuadraticObservable, tau: float, x: Any) -> np.ndarray:
    """Flow ``x`` for time ``tau`` along the Hamiltonian vector field of ``c``."""
    _check_type(c, "c", [QuadraticObservable])
    return combined_flow(SymmetryBank.from_quantities([c]), [float(tau)], x)


# ---------------------------------------------------------------------------
# symmetrisation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TauMeasure:
    """Distribution of symmetry times: unit ``normal`` or ``uniform(lo, hi)``."""

    kind: str = "normal"
    lo: float = 0.0
    hi: float = 2.0 * math.pi

    def __post_init__(self) -> None:
        """Validate the measure."""
        if self.kind not in TAU_MEASURES:
            raise PreconditionError(
                f"Unsupported tau measure {self.kind!r}, expected one of {TAU_MEASURES}."
            )
        if self.kind == "uniform" and not self.lo < self.hi:
            raise DomainError(
                f"Uniform tau measure needs lo < hi, got lo={self.lo}, hi={self.hi}."
            )


def sample_tau(measure: TauMeasure, k: int, s: int, rng: Any) -> np.ndarray:
    """Draw ``S`` i.i.d. symmetry-time vectors, shape ``(S, K)``."""
    _check_type(measure, "measure", [TauMeasure])
    if s < 1:
        raise PreconditionError(f"Need at least one tau sample, got S={s}.")
    if k < 0:
        raise PreconditionError(f"``k`` must be non-negative, got {k}.")
    rng = make_rng(rng)
    if measure.kind == "uniform":
        return rng.uniform(measure.lo, measure.hi, size=(s, k))
    return rng.standard_normal((s, k))


def symmetrized_energy(
    h: ScalarField,
    bank: SymmetryBank,
    x: gc.Node,
    transforms: Optional[Tuple[gc.Node, gc.Node]],
) -> gc.Node:
    """Average ``h`` over precomputed orbit transforms of the rows of ``x``.

    ``x`` has shape ``(P, M)`` and the result shape ``(P,)``. With
    ``transforms`` set to None, or an empty bank, this is ``h(x)``.
    """
    if transforms is None or bank.n_quantities == 0:
        return h(x)
    moved = apply_transforms(transforms[0], transforms[1], x)
    # mean over samples, accumulated by the reduction in sample order
    return h(moved).mean(axis=0)


def symmetrize(h: ScalarField, bank: SymmetryBank, x: Any, taus: Any) -> gc.Node:
    """Monte-Carlo symmetrised field ``(1/S) sum_s h(flow(bank, tau_s, x))``.

    Parameters
    ----------
    h : callable
        Scalar field mapping a node ``(..., M)`` to one value per row.

    bank : SymmetryBank
        Observables generating the symmetry group.

    x : array_like or Node
        Point ``(M,)`` or batch ``(P, M)``.

    taus : array_like
        Symmetry times ``(S, K)``.

    Returns
    -------
    Node
        Scalar for a single point, ``(P,)`` for a batch.
    """
    _check_type(bank, "bank", [SymmetryBank])
    node = gc.as_node(x)
    if node.shape[-1] != bank.phase_dim:
        raise ShapeError(
            f"Bank has phase dimension {bank.phase_dim}, got points of shape {node.shape}."
        )
    single = node.ndim == 1
    rows = node.reshape((1, bank.phase_dim)) if single else node
    transforms = None
    if bank.n_quantities:
        transforms = orbit_transforms(bank, taus)
    out = symmetrized_energy(h, bank, rows, transforms)
    return out.reshape(()) if single else out


# ---------------------------------------------------------------------------
# brackets
# ---------------------------------------------------------------------------


def quadratic_bracket(
    c1: QuadraticObservable, c2: QuadraticObservable
) -> Tuple[QuadraticObservable, float]:
    """Return ``{C1, C2}`` in closed form as an observable plus a constant.

    For ``grad C_i = A_i x + b_i`` the bracket is
    ``x^T (A1 J A2 - A2 J A1) x / 2 + (A1 J b2 - A2 J b1)^T x + b1^T J b2``.
    """
    if c1.phase_dim != c2.phase_dim:
        raise ShapeError("Observables have different phase dimensions.")
    jmat = symplectic_form(c1.phase_dim)
    prod = c1.A @ jmat @ c2.A
    quad = prod + prod.T
    lin = c1.A @ jmat @ c2.b - c2.A @ jmat @ c1.b
    return QuadraticObservable(quad, lin), float(c1.b @ jmat @ c2.b)


def _coefficients(c: QuadraticObservable) -> np.ndarray:
    rows, cols = np.triu_indices(c.phase_dim)
    return np.concatenate([c.A[rows, cols], c.b])


def bracket_residual(bank: SymmetryBank) -> float:
    """Largest relative part of a pairwise bracket outside the span of the bank.

    Zero when the bank spans a subspace closed under the bracket (up to
    constants). Banks with fewer than two observables return 0.
    """
    quantities = [c for c in bank.quantities() if not c.is_zero()]
    if len(quantities) < 2:
        return 0.0
    basis = np.stack([_coefficients(c) for c in quantities], axis=1)
    worst = 0.0
    for i, c1 in enumerate(quantities):
        for c2 in quantities[i + 1 :]:
            target = _coefficients(quadratic_bracket(c1, c2)[0])
            norm = np.linalg.norm(target)
            if norm == 0.0:
                continue
            coef, *_ = np.linalg.lstsq(basis, target, rcond=None)
            worst = max(worst, float(np.linalg.norm(target - basis @ coef) / norm))
    LOG.debug("bracket residual over %d observables: %.3g", len(quantities), worst)
    return worst

