"""
This module contains the neural Hamiltonian and its Euler rollout.

The network ``F_theta`` is a stack of affine layers with ELU activations and a
scalar output. Every layer is stored as one augmented matrix ``[W b]`` of
shape ``(out, in + 1)``, which is also the layout of the matrix-normal
posteriors in :mod:`noetherrazor.variational`.

Examples
--------
>>> import numpy as np
>>> from noetherrazor.model import MLPArchitecture, MLPParameters, mlp_forward
>>> arch = MLPArchitecture(input_dim=2, hidden=(16, 16), alpha=2.0)
>>> theta = MLPParameters.initialize(arch, rng=0)
>>> float(mlp_forward(theta, np.zeros(2)).item()) == 0.0
True
"""
import math
from dataclasses import asdict, dataclass
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np  # type: ignore

from . import gradcore as gc
from .conserved import SymmetryBank, orbit_transforms, symmetrized_energy
from .dynamics import apply_j
from .errors import DivergenceError, DomainError, PreconditionError, ShapeError
from .utils import _check_type, make_rng

DEFAULT_EULER_STEPS = 20


@dataclass(frozen=True)
class MLPArchitecture:
    """Layer widths and activation of the Hamiltonian network.

    Parameters
    ----------
    input_dim : int
        Phase dimension ``M``.

    hidden : tuple of int
        Widths of the hidden layers.

    alpha : float
        Scale of the ELU activation for negative inputs.
    """

    input_dim: int
    hidden: Tuple[int, ...] = (200, 200)
    alpha: float = 1.0

    def __post_init__(self) -> None:
        """Validate the architecture."""
        object.__setattr__(self, "hidden", tuple(int(w) for w in self.hidden))
        if self.input_dim < 1:
            raise PreconditionError(f"``input_dim`` must be positive, got {self.input_dim}.")
        if any(w < 1 for w in self.hidden):
            raise PreconditionError(f"Hidden widths must be positive, got {self.hidden}.")
        if not self.alpha > 0:
            raise DomainError(f"``alpha`` must be strictly positive, got {self.alpha}.")

    @property
    def layer_shapes(self) -> List[Tuple[int, int]]:
        """Return ``(out, in)`` for every layer, the last one with ``out = 1``."""
        widths = (self.input_dim,) + self.hidden + (1,)
        return [(widths[i + 1], widths[i]) for i in range(len(widths) - 1)]

    def to_dict(self) -> Dict[str, Any]:
        """Return the architecture as plain python."""
        out = asdict(self)
        out["hidden"] = list(self.hidden)
        return out

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "MLPArchitecture":
        """Build an architecture from :meth:`to_dict` output."""
        return cls(
            input_dim=int(data["input_dim"]),
            hidden=tuple(data["hidden"]),
            alpha=float(data["alpha"]),
        )


class MLPParameters:
    """Augmented layer matrices ``[W_l b_l]`` of the network.

    Parameters
    ----------
    arch : MLPArchitecture
        Architecture the matrices belong to.

    layers : sequence of array_like or Node
        One ``(out_l, in_l + 1)`` matrix per layer.
    """

    def __init__(self, arch: MLPArchitecture, layers: Sequence[Any]) -> None:
        """Initialize the parameters."""
        _check_type(arch, "arch", [MLPArchitecture])
        self.arch = arch
        self.layers = [gc.as_node(layer) for layer in layers]
        shapes = arch.layer_shapes
        if len(self.layers) != len(shapes):
            raise ShapeError(f"Expected {len(shapes)} layers, got {len(self.layers)}.")
        for layer, (out, inp) in zip(self.layers, shapes):
            if layer.shape != (out, inp + 1):
                raise ShapeError(
                    f"Layer matrix must be {(out, inp + 1)}, got {layer.shape}."
                )

    @classmethod
    def initialize(cls, arch: MLPArchitecture, rng: Any = None) -> "MLPParameters":
        """Draw weights with standard deviation ``1 / sqrt(in)`` and zero biases."""
        rng = make_rng(rng)
        layers = []
        for out, inp in arch.layer_shapes:
            weights = rng.standard_normal((out, inp)) / math.sqrt(inp)
            layers.append(np.concatenate([weights, np.zeros((out, 1))], axis=1))
        return cls(arch, layers)

    @classmethod
    def from_arrays(
        cls, arch: MLPArchitecture, weights: Sequence[Any], biases: Sequence[Any]
    ) -> "MLPParameters":
        """Build parameters from separate weight matrices and bias vectors."""
        layers = [
            np.concatenate(
                [np.asarray(w, dtype=np.float64), np.asarray(b, dtype=np.float64).reshape(-1, 1)],
                axis=1,
            )
            for w, b in zip(weights, biases)
        ]
        return cls(arch, layers)

    @property
    def weights(self) -> List[np.ndarray]:
        """Return the weight matrices ``(out, in)``."""
        return [layer.value[:, :-1] for layer in self.layers]

    @property
    def biases(self) -> List[np.ndarray]:
        """Return the bias vectors."""
        return [layer.value[:, -1] for layer in self.layers]


def mlp_forward(theta: MLPParameters, x: Any) -> gc.Node:
    """Evaluate ``F_theta`` on a point ``(..., M)``, one value per row."""
    _check_type(theta, "theta", [MLPParameters])
    node = gc.as_node(x)
    if node.shape[-1] != theta.arch.input_dim:
        raise ShapeError(
            f"Network expects inputs of size {theta.arch.input_dim}, got {node.shape}."
        )
    lead = node.shape[:-1]
    hidden = node.reshape((-1, node.shape[-1]))
    last = len(theta.layers) - 1
    for index, layer in enumerate(theta.layers):
        hidden = hidden @ layer[:, :-1].T + layer[:, -1]
        if index != last:
            hidden = gc.elu(hidden, theta.arch.alpha)
    return hidden.reshape(lead)


def mlp_field(theta: MLPParameters) -> Callable[[gc.Node], gc.Node]:
    """Return ``F_theta`` as a scalar field."""
    return lambda x: mlp_forward(theta, x)


def _transforms_for(
    bank: SymmetryBank, taus: Optional[Any], n_steps: int
) -> List[Optional[Tuple[gc.Node, gc.Node]]]:
    if bank.n_quantities == 0:
        return [None] * n_steps
    if taus is None:
        raise PreconditionError("Symmetry times are required for a non-empty bank.")
    tau = np.asarray(taus, dtype=np.float64)
    if tau.ndim == 2:
        shared = orbit_transforms(bank, tau)
        return [shared] * n_steps
    if tau.ndim == 3 and tau.shape[0] == n_steps:
        return [orbit_transforms(bank, tau[i]) for i in range(n_steps)]
    raise ShapeError(
        f"Expected symmetry times (S, K) or ({n_steps}, S, K), got {tau.shape}."
    )


def rollout_mean(
    theta: MLPParameters,
    bank: SymmetryBank,
    x_t: Any,
    dt: float,
    n_steps: int = DEFAULT_EULER_STEPS,
    taus: Optional[Any] = None,
) -> gc.Node:
    """Predict ``x_t'`` with ``n_steps`` Euler steps of the symmetrised field.

    Each step is ``x <- x + (dt / n_steps) J grad H(x)`` where ``H`` averages
    ``F_theta`` over the bank's orbit of ``x``. Symmetry times of shape
    ``(S, K)`` are shared by all steps; a ``(n_steps, S, K)`` array gives each
    step its own batch.

    Parameters
    ----------
    theta : MLPParameters
        Network parameters, constants or variables.

    bank : SymmetryBank
        Conserved quantities, empty for a plain Hamiltonian network.

    x_t : array_like or Node
        Start point ``(M,)`` or batch ``(P, M)``.

    dt : float
        Time gap to predict over.

    n_steps : int
        Number of Euler sub-steps.

    taus : array_like, optional
        Symmetry times, required when the bank is not empty.

    Returns
    -------
    Node
        Prediction with the shape of ``x_t``, differentiable in ``theta``,
        the bank parameters and ``x_t``.
    """
    _check_type(theta, "theta", [MLPParameters])
    _check_type(bank, "bank", [SymmetryBank])
    if n_steps < 1:
        raise PreconditionError(f"``n_steps`` must be at least 1, got {n_steps}.")
    node = gc.as_node(x_t)
    if node.shape[-1] != theta.arch.input_dim or node.shape[-1] != bank.phase_dim:
        raise ShapeError(
            f"Network and bank dimensions ({theta.arch.input_dim}, {bank.phase_dim}) "
            f"do not match the points {node.shape}."
        )
    single = node.ndim == 1
    state = node.reshape((1, -1)) if single else node
    if not state.requires_grad:
        state = gc.variable(state.value)
    if dt == 0:
        return node
    field = mlp_field(theta)
    h = dt / n_steps
    for step, transforms in enumerate(_transforms_for(bank, taus, n_steps)):
        with np.errstate(over="ignore", invalid="ignore"):
            energy = symmetrized_energy(field, bank, state, transforms)
            state = state + apply_j(gc.grad(energy.sum(), state)) * h
        finite = np.all(np.isfinite(state.value), axis=1)
        if not np.all(finite):
            raise DivergenceError(
                "Non-finite state in the Euler rollout",
                step=step + 1,
                rows=np.flatnonzero(~finite).tolist(),
            )
    return state.reshape(node.shape) if single else state


def log_likelihood(pred: Any, target: Any, sigma2_data: float) -> gc.Node:
    """Gaussian log-density of ``target`` around ``pred`` with variance ``sigma2_data``.

    Summed over the ``M`` coordinates: a scalar for one point, one value per
    row for a batch.
    """
    if not sigma2_data > 0:
        raise DomainError(f"Output variance must be strictly positive, got {sigma2_data}.")
    pred = gc.as_node(pred)
    target = gc.as_node(target)
    if pred.shape != target.shape:
        raise ShapeError(f"Prediction {pred.shape} and target {target.shape} differ.")
    resid = pred - target
    m = pred.shape[-1]
    norm = -0.5 * m * math.log(2.0 * math.pi * sigma2_data)
    return (resid * resid).sum(axis=-1) * (-0.5 / sigma2_data) + norm
