"""
This module contains the ground-truth dynamical systems and dataset synthesis.

Phase points are ``numpy`` vectors ``x = (q, p)`` of even length ``M``. Batches
of points are arrays of shape ``(B, M)``. For the n-body system the position
of body ``i`` along axis ``d`` sits at index ``i * D + d`` and its momentum at
``n * D + i * D + d``.

Examples
--------
>>> from noetherrazor.dynamics import SystemSpec, recipe_for, sample_dataset
>>> spec = SystemSpec(kind="sho")
>>> data = sample_dataset(spec, recipe_for(spec, "train"), seed=0)
>>> data.n_pairs
21
"""
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np  # type: ignore

from . import gradcore as gc
from .errors import DivergenceError, DomainError, PreconditionError, ShapeError
from .utils import LOG, _check_type, make_rng, read_json, spawn_seeds, write_json

SYSTEM_KINDS = ("sho", "nharm", "nbody")
POTENTIAL_SIGNS = ("attractive", "repulsive")
# other accepted spellings of a sign
SIGN_ALIASES = {"paper-verbatim": "repulsive"}
VARIANTS = ("train", "test", "moved", "wider")

# internal RK4 step bounds when substeps is not given
MAX_INTERNAL_STEP = 0.01
NBODY_INTERNAL_STEP = 0.001
# relative energy drift a sampled dataset may show before substeps are doubled
ENERGY_DRIFT_TOL = 1e-5
DRIFT_REFINEMENTS = 3
RESAMPLE_LIMIT = 10

ScalarField = Callable[[gc.Node], gc.Node]


@dataclass(frozen=True)
class SystemSpec:
    """Description of a ground-truth Hamiltonian system.

    Parameters
    ----------
    kind : str
        One of ``"sho"``, ``"nharm"`` or ``"nbody"``.

    n : int
        Number of oscillators or bodies. Ignored for ``"sho"``.

    d : int
        Spatial dimension of the n-body system.

    masses : tuple of float, optional
        Per-oscillator or per-body masses, all ones by default.

    k : float
        Spring constant of the oscillators.

    G : float
        Gravitational constant.

    eps : float
        Softening length of the gravitational potential.

    sign : str
        ``"attractive"`` for a negative potential, ``"repulsive"`` for
        the positive one. ``"paper-verbatim"`` is read as ``"repulsive"``.
    """

    kind: str = "sho"
    n: int = 1
    d: int = 2
    masses: Optional[Tuple[float, ...]] = None
    k: float = 1.0
    G: float = 1.0  # pylint: disable=invalid-name
    eps: float = 0.1
    sign: str = "attractive"

    def __post_init__(self) -> None:
        """Validate the specification."""
        if self.kind not in SYSTEM_KINDS:
            raise PreconditionError(
                f"Unsupported system kind {self.kind!r}, expected one of {SYSTEM_KINDS}."
            )
        if self.kind == "sho" and self.n != 1:
            object.__setattr__(self, "n", 1)
        if self.n < 1:
            raise PreconditionError(f"``n`` must be at least 1, got {self.n}.")
        if self.d < 1:
            raise PreconditionError(f"``d`` must be at least 1, got {self.d}.")
        if not self.eps > 0:
            raise DomainError(f"``eps`` must be strictly positive, got {self.eps}.")
        object.__setattr__(self, "sign", SIGN_ALIASES.get(self.sign, self.sign))
        if self.sign not in POTENTIAL_SIGNS:
            raise PreconditionError(
                f"Unsupported potential sign {self.sign!r}, expected one of {POTENTIAL_SIGNS}."
            )
        if self.masses is not None:
            masses = tuple(float(m) for m in self.masses)
            if len(masses) != self.n:
                raise ShapeError(f"Expected {self.n} masses, got {len(masses)}.")
            if min(masses) <= 0:
                raise DomainError("Masses must be strictly positive.")
            object.__setattr__(self, "masses", masses)

    @property
    def n_dof(self) -> int:
        """Return the number of position coordinates ``M / 2``."""
        if self.kind == "nbody":
            return self.n * self.d
        return self.n

    @property
    def phase_dim(self) -> int:
        """Return the phase-space dimension ``M``."""
        return 2 * self.n_dof

    @property
    def mass_array(self) -> np.ndarray:
        """Return the masses as an array of length ``n``."""
        if self.masses is None:
            return np.ones(self.n)
        return np.asarray(self.masses, dtype=np.float64)

    @property
    def potential_sign(self) -> float:
        """Return -1 for an attractive potential and +1 otherwise."""
        return -1.0 if self.sign == "attractive" else 1.0

    @property
    def label(self) -> str:
        """Return a short label such as ``nbody(3,2)``."""
        if self.kind == "sho":
            return "sho"
        if self.kind == "nharm":
            return f"nharm({self.n})"
        return f"nbody({self.n},{self.d})"

    def to_dict(self) -> Dict[str, Any]:
        """Return the specification as plain python."""
        out = asdict(self)
        out["masses"] = None if self.masses is None else list(self.masses)
        return out

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SystemSpec":
        """Build a specification from :meth:`to_dict` output."""
        data = dict(data)
        if data.get("masses") is not None:
            data["masses"] = tuple(data["masses"])
        return cls(**data)


@dataclass(frozen=True)
class DataRecipe:
    """How to sample initial conditions and how long to simulate them.

    ``shift_std`` and ``offset`` only apply to the n-body system: every
    trajectory's positions are shifted by one normal draw of standard
    deviation ``shift_std`` per spatial axis, then translated by ``offset``
    along the first two spatial axes.
    """

    n_traj: int
    points_per_traj: int
    dt: float
    variant: str = "train"
    shift_std: float = 3.0
    offset: float = 0.0
    substeps: Optional[int] = None

    def __post_init__(self) -> None:
        """Validate the recipe."""
        if self.n_traj < 1:
            raise PreconditionError(f"``n_traj`` must be positive, got {self.n_traj}.")
        if self.points_per_traj < 2:
            raise PreconditionError(
                f"``points_per_traj`` must be at least 2, got {self.points_per_traj}."
            )
        if not self.dt > 0:
            raise PreconditionError(f"``dt`` must be strictly positive, got {self.dt}.")
        if self.variant not in VARIANTS:
            raise PreconditionError(
                f"Unsupported variant {self.variant!r}, expected one of {VARIANTS}."
            )
        if self.shift_std < 0:
            raise DomainError(f"``shift_std`` must be non-negative, got {self.shift_std}.")

    def to_dict(self) -> Dict[str, Any]:
        """Return the recipe as plain python."""
        return asdict(self)


def recipe_for(spec: SystemSpec, variant: str = "train", **overrides: Any) -> DataRecipe:
    """Return the standard data recipe of ``spec`` for ``variant``.

    The simple oscillator trains on 7 trajectories of 4 points 0.2 apart; the
    other systems train on 200 trajectories of 50 points 0.3 apart. Every test
    split has 100 trajectories of 21 points at the training time gap. The
    ``moved`` and ``wider`` splits only exist for the n-body system.
    """
    if variant not in VARIANTS:
        raise PreconditionError(
            f"Unsupported variant {variant!r}, expected one of {VARIANTS}."
        )
    if variant in ("moved", "wider") and spec.kind != "nbody":
        raise PreconditionError(f"The {variant!r} split requires an n-body system.")
    dt = 0.2 if spec.kind == "sho" else 0.3
    if variant == "train":
        counts = (7, 4) if spec.kind == "sho" else (200, 50)
    else:
        counts = (100, 21)
    params: Dict[str, Any] = dict(
        n_traj=counts[0], points_per_traj=counts[1], dt=dt, variant=variant
    )
    if variant == "moved":
        params["offset"] = 5.0
    if variant == "wider":
        params["shift_std"] = 6.0
    params.update(overrides)
    return DataRecipe(**params)


@dataclass
class Dataset:
    """Consecutive pairs ``(x_t, x_t')`` of simulated trajectories."""

    x_t: np.ndarray
    x_tp: np.ndarray
    dt: float
    traj: np.ndarray
    spec: SystemSpec
    recipe: Optional[DataRecipe] = None
    seed: Optional[int] = None
    config: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        """Validate the pairs."""
        self.x_t = np.asarray(self.x_t, dtype=np.float64)
        self.x_tp = np.asarray(self.x_tp, dtype=np.float64)
        self.traj = np.asarray(self.traj, dtype=np.int64)
        if self.x_t.ndim != 2 or self.x_t.shape != self.x_tp.shape:
            raise ShapeError(
                f"Pairs must be two equal (N, M) arrays, got {self.x_t.shape} "
                f"and {self.x_tp.shape}."
            )
        if self.traj.shape != (self.x_t.shape[0],):
            raise ShapeError("``traj`` needs one trajectory index per pair.")
        if self.x_t.shape[1] % 2:
            raise ShapeError(f"Phase dimension must be even, got {self.x_t.shape[1]}.")
        if not (np.all(np.isfinite(self.x_t)) and np.all(np.isfinite(self.x_tp))):
            raise DomainError("Dataset contains non-finite phase points.")

    @property
    def n_pairs(self) -> int:
        """Return the number of pairs ``N``."""
        return int(self.x_t.shape[0])

    @property
    def phase_dim(self) -> int:
        """Return the phase dimension ``M``."""
        return int(self.x_t.shape[1])

    def trajectory_ids(self) -> np.ndarray:
        """Return the distinct trajectory indices in order of appearance."""
        _, first = np.unique(self.traj, return_index=True)
        return self.traj[np.sort(first)]

    def subset(self, trajectories: Sequence[int]) -> "Dataset":
        """Return the pairs of the given trajectories."""
        mask = np.isin(self.traj, np.asarray(trajectories))
        return replace(
            self, x_t=self.x_t[mask], x_tp=self.x_tp[mask], traj=self.traj[mask]
        )

    def trajectories(self) -> List[np.ndarray]:
        """Rebuild each trajectory as an array of its consecutive states."""
        out = []
        for index in self.trajectory_ids():
            mask = self.traj == index
            out.append(np.concatenate([self.x_t[mask][:1], self.x_tp[mask]], axis=0))
        return out

    def to_dict(self) -> Dict[str, Any]:
        """Return the serialisable document (without ``schema_version``)."""
        return {
            "system": self.spec.to_dict(),
            "recipe": None if self.recipe is None else self.recipe.to_dict(),
            "seed": self.seed,
            "dt": float(self.dt),
            "config": self.config,
            "pairs": [
                {"traj": int(t), "x_t": a.tolist(), "x_tp": b.tolist()}
                for t, a, b in zip(self.traj, self.x_t, self.x_tp)
            ],
        }

    @classmethod
    def from_dict(cls, document: Dict[str, Any]) -> "Dataset":
        """Build a dataset from :meth:`to_dict` output."""
        pairs = document["pairs"]
        if not pairs:
            raise PreconditionError("Dataset document has no pairs.")
        recipe = document.get("recipe")
        return cls(
            x_t=np.array([pair["x_t"] for pair in pairs], dtype=np.float64),
            x_tp=np.array([pair["x_tp"] for pair in pairs], dtype=np.float64),
            dt=float(document["dt"]),
            traj=np.array([pair["traj"] for pair in pairs], dtype=np.int64),
            spec=SystemSpec.from_dict(document["system"]),
            recipe=None if recipe is None else DataRecipe(**recipe),
            seed=document.get("seed"),
            config=document.get("config") or {},
        )

    def save(self, path: str) -> None:
        """Write the dataset as a JSON artifact."""
        write_json(path, self.to_dict())

    @classmethod
    def load(cls, path: str) -> "Dataset":
        """Read a dataset JSON artifact."""
        return cls.from_dict(read_json(path))


# ---------------------------------------------------------------------------
# symplectic structure
# ---------------------------------------------------------------------------


def symplectic_form(m: int) -> np.ndarray:
    """Return ``J = [[0, I], [-I, 0]]`` of size ``m``."""
    if m % 2:
        raise ShapeError(f"Phase dimension must be even, got {m}.")
    half = m // 2
    out = np.zeros((m, m))
    out[:half, half:] = np.eye(half)
    out[half:, :half] = -np.eye(half)
    return out


def apply_j(g: gc.Node) -> gc.Node:
    """Map row gradients ``(dq, dp)`` to ``(dp, -dq)``, i.e. ``J g`` per row."""
    half = g.shape[-1] // 2
    return gc.concatenate([g[..., half:], -g[..., :half]], axis=-1)


def _as_points(x: Any, spec: Optional[SystemSpec] = None) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim not in (1, 2):
        raise ShapeError(f"Expected a point or a batch of points, got shape {arr.shape}.")
    if spec is not None and arr.shape[-1] != spec.phase_dim:
        raise ShapeError(
            f"{spec.label} has phase dimension {spec.phase_dim}, got {arr.shape[-1]}."
        )
    if arr.shape[-1] % 2:
        raise ShapeError(f"Phase dimension must be even, got {arr.shape[-1]}.")
    return arr


# ---------------------------------------------------------------------------
# ground truth
# ---------------------------------------------------------------------------


def _kinetic_masses(spec: SystemSpec) -> np.ndarray:
    # one mass per momentum coordinate
    if spec.kind == "nbody":
        return np.repeat(spec.mass_array, spec.d)
    return spec.mass_array


def _pair_weights(spec: SystemSpec) -> np.ndarray:
    masses = spec.mass_array
    weights = spec.potential_sign * spec.G * np.outer(masses, masses)
    np.fill_diagonal(weights, 0.0)
    return weights


def ground_truth_hamiltonian(spec: SystemSpec, x: Any) -> Union[float, np.ndarray]:
    """Evaluate the energy of ``spec`` at one point or a batch of points.

    Parameters
    ----------
    spec : SystemSpec
        System to evaluate.

    x : array_like
        Phase point of shape ``(M,)`` or batch ``(B, M)``.

    Returns
    -------
    float or numpy.ndarray
        Energy, one value per row for a batch.
    """
    _check_type(spec, "spec", [SystemSpec])
    arr = _as_points(x, spec)
    batch = arr.reshape(-1, spec.phase_dim)
    half = spec.n_dof
    q, p = batch[:, :half], batch[:, half:]
    energy = 0.5 * np.sum(p**2 / _kinetic_masses(spec), axis=1)
    if spec.kind == "nbody":
        pos = q.reshape(-1, spec.n, spec.d)
        diff = pos[:, :, None, :] - pos[:, None, :, :]
        dist = np.sqrt(np.sum(diff**2, axis=-1) + spec.eps**2)
        energy = energy + np.sum(_pair_weights(spec) / dist, axis=(1, 2))
    else:
        energy = energy + 0.5 * spec.k * np.sum(q**2, axis=1)
    if arr.ndim == 1:
        return float(energy[0])
    return energy


def ground_truth_gradient(spec: SystemSpec, x: Any) -> np.ndarray:
    """Return the analytic ``dH/dx`` with the shape of ``x``."""
    arr = _as_points(x, spec)
    batch = arr.reshape(-1, spec.phase_dim)
    half = spec.n_dof
    q, p = batch[:, :half], batch[:, half:]
    dp = p / _kinetic_masses(spec)
    if spec.kind == "nbody":
        pos = q.reshape(-1, spec.n, spec.d)
        diff = pos[:, :, None, :] - pos[:, None, :, :]
        inv3 = (np.sum(diff**2, axis=-1) + spec.eps**2) ** -1.5
        # each unordered pair appears twice in the potential
        coef = -2.0 * _pair_weights(spec) * inv3
        dq = np.sum(coef[..., None] * diff, axis=2).reshape(-1, half)
    else:
        dq = spec.k * q
    return np.concatenate([dq, dp], axis=1).reshape(arr.shape)


def hamiltonian_field(spec: SystemSpec) -> ScalarField:
    """Return the energy of ``spec`` as a differentiable scalar field.

    The returned callable maps a node of shape ``(..., M)`` to a node with one
    energy per row.
    """
    half = spec.n_dof
    inv_mass = 1.0 / _kinetic_masses(spec)

    def _energy(x: gc.Node) -> gc.Node:
        q, p = x[..., :half], x[..., half:]
        kinetic = (p * p * (0.5 * inv_mass)).sum(axis=-1)
        if spec.kind != "nbody":
            return kinetic + (q * q).sum(axis=-1) * (0.5 * spec.k)
        lead = q.shape[:-1]
        pos = q.reshape(lead + (spec.n, spec.d))
        diff = pos.reshape(lead + (spec.n, 1, spec.d)) - pos.reshape(
            lead + (1, spec.n, spec.d)
        )
        dist2 = (diff * diff).sum(axis=-1) + spec.eps**2
        potential = (gc.power(dist2, -0.5) * _pair_weights(spec)).sum(axis=(-2, -1))
        return kinetic + potential

    return _energy


# ---------------------------------------------------------------------------
# vector fields and brackets
# ---------------------------------------------------------------------------


def _field_gradient(h: ScalarField, x: Any) -> np.ndarray:
    arr = _as_points(x)
    node = gc.variable(arr)
    return gc.backward(gc.reduce_sum(h(node)), [node])[0]


def hamiltonian_vector_field(h: ScalarField, x: Any) -> np.ndarray:
    """Return ``J grad H(x)`` for a scalar field ``h``.

    Parameters
    ----------
    h : callable
        Maps a node of shape ``(..., M)`` to one value per row.

    x : array_like
        Point ``(M,)`` or batch ``(B, M)``.
    """
    grad = _field_gradient(h, x)
    half = grad.shape[-1] // 2
    return np.concatenate([grad[..., half:], -grad[..., :half]], axis=-1)


def poisson_bracket(o1: ScalarField, o2: ScalarField, x: Any) -> Union[float, np.ndarray]:
    """Return ``{O1, O2}(x) = grad O1 . J grad O2`` per point."""
    arr = _as_points(x)
    g1 = _field_gradient(o1, arr)
    field2 = hamiltonian_vector_field(o2, arr)
    out = np.sum(g1 * field2, axis=-1)
    if arr.ndim == 1:
        return float(out)
    return out


# ---------------------------------------------------------------------------
# integration
# ---------------------------------------------------------------------------


def _integrate(
    vector_field: Callable[[np.ndarray], np.ndarray],
    x0: np.ndarray,
    dt: float,
    steps: int,
    substeps: int,
) -> Tuple[np.ndarray, np.ndarray]:
    """RK4 over a batch; returns states ``(B, steps, M)`` and the first bad step per row."""
    h = dt / substeps
    state = x0.copy()
    out = np.empty((x0.shape[0], steps, x0.shape[1]))
    first_bad = np.full(x0.shape[0], -1, dtype=np.int64)
    for step in range(steps):
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            for _ in range(substeps):
                k1 = vector_field(state)
                k2 = vector_field(state + 0.5 * h * k1)
                k3 = vector_field(state + 0.5 * h * k2)
                k4 = vector_field(state + h * k3)
                state = state + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        bad = ~np.all(np.isfinite(state), axis=1) & (first_bad < 0)
        first_bad[bad] = step + 1
        # park diverged rows so they do not poison later arithmetic
        state[first_bad >= 0] = 0.0
        out[:, step] = state
    return out, first_bad


def _check_integration(
    dt: float, steps: int, substeps: Optional[int], max_step: float = MAX_INTERNAL_STEP
) -> int:
    if not dt > 0:
        raise PreconditionError(f"``dt`` must be strictly positive, got {dt}.")
    if steps < 1:
        raise PreconditionError(f"``steps`` must be at least 1, got {steps}.")
    if substeps is None:
        return max(1, int(math.ceil(dt / max_step - 1e-9)))
    if substeps < 1:
        raise PreconditionError(f"``substeps`` must be at least 1, got {substeps}.")
    return int(substeps)


def max_internal_step(spec: SystemSpec) -> float:
    """Return the default bound on the internal RK4 step for ``spec``.

    The softened gravitational potential needs a ten times finer step than
    the oscillators for the energy to hold to about 1e-6.
    """
    return NBODY_INTERNAL_STEP if spec.kind == "nbody" else MAX_INTERNAL_STEP


def energy_drift(spec: SystemSpec, x0: Any, states: Any) -> np.ndarray:
    """Return the largest relative energy change of each trajectory.

    Parameters
    ----------
    spec : SystemSpec
        System the trajectories follow.

    x0 : array_like
        Initial points ``(B, M)``.

    states : array_like
        Later states ``(B, T, M)``.

    Returns
    -------
    numpy.ndarray
        ``max_t |H(x_t) - H(x_0)| / max(1, |H(x_0)|)`` per trajectory.
    """
    x0 = np.asarray(x0, dtype=np.float64).reshape(-1, spec.phase_dim)
    states = np.asarray(states, dtype=np.float64).reshape(x0.shape[0], -1, spec.phase_dim)
    start = ground_truth_hamiltonian(spec, x0)
    later = ground_truth_hamiltonian(spec, states.reshape(-1, spec.phase_dim))
    later = later.reshape(x0.shape[0], -1)
    change = np.abs(later - start[:, None]).max(axis=1)
    return change / np.maximum(1.0, np.abs(start))


def rk4_integrate(
    vector_field: Callable[[np.ndarray], np.ndarray],
    x0: Any,
    dt: float,
    steps: int,
    substeps: Optional[int] = None,
) -> np.ndarray:
    """Integrate ``dx/dt = vector_field(x)`` with the classical RK4 scheme.

    ``vector_field`` receives a batch ``(B, M)``. The states at
    ``dt, 2 dt, ..., steps dt`` are returned with shape ``(steps, M)`` for a
    single point or ``(B, steps, M)`` for a batch.
    """
    substeps = _check_integration(dt, steps, substeps)
    arr = _as_points(x0)
    batch = arr.reshape(-1, arr.shape[-1])
    states, first_bad = _integrate(vector_field, batch, dt, steps, substeps)
    if np.any(first_bad >= 0):
        rows = np.flatnonzero(first_bad >= 0)
        raise DivergenceError(
            f"Non-finite state in {rows.size} trajectories",
            step=int(first_bad[rows].min()),
            rows=rows.tolist(),
        )
    if arr.ndim == 1:
        return states[0]
    return states


def _analytic_field(spec: SystemSpec) -> Callable[[np.ndarray], np.ndarray]:
    def _field(state: np.ndarray) -> np.ndarray:
        grad = ground_truth_gradient(spec, state)
        half = spec.n_dof
        return np.concatenate([grad[:, half:], -grad[:, :half]], axis=1)

    return _field


def rk4_simulate(
    spec: SystemSpec,
    x0: Any,
    dt: float,
    steps: int,
    substeps: Optional[int] = None,
) -> np.ndarray:
    """Simulate ``spec`` from ``x0`` with RK4 on its analytic vector field.

    The internal step is ``dt / substeps``; by default ``substeps`` keeps it at
    most :func:`max_internal_step` time units.
    """
    _check_type(spec, "spec", [SystemSpec])
    _as_points(x0, spec)
    substeps = _check_integration(dt, steps, substeps, max_internal_step(spec))
    return rk4_integrate(_analytic_field(spec), x0, dt, steps, substeps)


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


def sample_initial(spec: SystemSpec, recipe: DataRecipe, rng: Any) -> np.ndarray:
    """Draw one initial condition.

    Oscillators draw every coordinate from a unit normal. Bodies draw unit
    normal positions shifted per trajectory, and unit normal momenta.
    """
    rng = make_rng(rng)
    if spec.kind != "nbody":
        return rng.standard_normal(spec.phase_dim)
    pos = rng.standard_normal((spec.n, spec.d))
    shift = recipe.shift_std * rng.standard_normal(spec.d)
    pos = pos + shift
    pos[:, : min(2, spec.d)] += recipe.offset
    mom = rng.standard_normal(spec.n * spec.d)
    return np.concatenate([pos.reshape(-1), mom])


def _simulate_rows(
    spec: SystemSpec,
    recipe: DataRecipe,
    children: Sequence[np.random.SeedSequence],
    x0: np.ndarray,
    substeps: int,
) -> np.ndarray:
    # integrate every row, redrawing the ones that diverge in place
    field_fn = _analytic_field(spec)
    steps = recipe.points_per_traj - 1
    states, first_bad = _integrate(field_fn, x0, recipe.dt, steps, substeps)
    for row in np.flatnonzero(first_bad >= 0):
        for attempt in range(RESAMPLE_LIMIT):
            retry = children[row].spawn(1)[0]
            LOG.warning(
                "trajectory %d diverged at step %d, resampling (%d/%d)",
                row,
                first_bad[row],
                attempt + 1,
                RESAMPLE_LIMIT,
            )
            x0[row] = sample_initial(spec, recipe, retry)
            single, bad = _integrate(field_fn, x0[row : row + 1], recipe.dt, steps, substeps)
            first_bad[row] = bad[0]
            if bad[0] < 0:
                states[row] = single[0]
                break
        else:
            raise DivergenceError(
                f"Trajectory {row} kept diverging after {RESAMPLE_LIMIT} resamples",
                step=int(first_bad[row]),
                rows=[int(row)],
            )
    return states


def sample_dataset(spec: SystemSpec, recipe: DataRecipe, seed: int) -> Dataset:
    """Simulate ``recipe.n_traj`` trajectories and collect consecutive pairs.

    Each trajectory draws from its own child seed, so the result only depends
    on ``seed``. A trajectory that diverges is redrawn from a fresh child of
    its seed, at most ``RESAMPLE_LIMIT`` times.

    Without explicit ``recipe.substeps`` the internal step starts at
    :func:`max_internal_step` and the substeps double, at most
    ``DRIFT_REFINEMENTS`` times, while any trajectory's relative energy drift
    exceeds ``ENERGY_DRIFT_TOL``. The substeps used are stored in the
    recipe of the returned dataset.
    """
    _check_type(spec, "spec", [SystemSpec])
    _check_type(recipe, "recipe", [DataRecipe])
    LOG.debug("sample_dataset start: %s %s", spec.label, recipe.variant)
    steps = recipe.points_per_traj - 1
    substeps = _check_integration(recipe.dt, steps, recipe.substeps, max_internal_step(spec))
    children = spawn_seeds(seed, recipe.n_traj)
    initial = np.stack([sample_initial(spec, recipe, child) for child in children])
    refinements = 0
    while True:
        x0 = initial.copy()
        states = _simulate_rows(spec, recipe, children, x0, substeps)
        drift = float(energy_drift(spec, x0, states).max())
        if drift <= ENERGY_DRIFT_TOL or recipe.substeps is not None:
            break
        if refinements == DRIFT_REFINEMENTS:
            LOG.warning(
                "energy drift %.2e still above %.0e with %d substeps",
                drift,
                ENERGY_DRIFT_TOL,
                substeps,
            )
            break
        refinements += 1
        substeps *= 2
        LOG.info("energy drift %.2e, doubling RK4 substeps to %d", drift, substeps)
    if drift > ENERGY_DRIFT_TOL and recipe.substeps is not None:
        LOG.warning("energy drift %.2e with %d fixed substeps", drift, substeps)
    full = np.concatenate([x0[:, None, :], states], axis=1)
    LOG.debug("sample_dataset stop: substeps=%d drift=%.2e", substeps, drift)
    return Dataset(
        x_t=full[:, :-1].reshape(-1, spec.phase_dim),
        x_tp=full[:, 1:].reshape(-1, spec.phase_dim),
        dt=recipe.dt,
        traj=np.repeat(np.arange(recipe.n_traj), steps),
        spec=spec,
        recipe=replace(recipe, substeps=substeps),
        seed=seed,
    )
