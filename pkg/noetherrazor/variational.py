"""
This module contains the variational posterior and the training loop.

Each layer carries a matrix-normal posterior over its augmented matrix
``[W b]`` with mean ``M`` and covariance ``(L_S L_S^T) (x) (L_A L_A^T)``. The
prior of every layer is an isotropic Gaussian whose variance is set to the
value ``v*`` that minimises the KL divergence in closed form, so the KL only
depends on the posterior. The ELBO averages the Gaussian log-likelihood of
Euler rollouts over weight samples, each with its own batch of symmetry
times.

Examples
--------
>>> from noetherrazor.dynamics import SystemSpec, recipe_for, sample_dataset
>>> from noetherrazor.model import MLPArchitecture
>>> from noetherrazor.variational import TrainConfig, train
>>> spec = SystemSpec(kind="sho")
>>> data = sample_dataset(spec, recipe_for(spec, "train"), seed=0)
>>> arch = MLPArchitecture(input_dim=2, hidden=(16,), alpha=2.0)
>>> config = TrainConfig(mode="learn", k=1, n_tau=8, epochs=2, n_steps=2)
>>> checkpoint = train(data, config, arch)
>>> len(checkpoint.curves["neg_elbo"])
2
"""
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np  # type: ignore

from . import gradcore as gc
from .conserved import SymmetryBank, TauMeasure, bracket_residual, sample_tau
from .dynamics import Dataset, SystemSpec
from .errors import (
    DivergenceError,
    DomainError,
    PreconditionError,
    ShapeError,
    TrainingAborted,
)
from .model import DEFAULT_EULER_STEPS, MLPArchitecture, MLPParameters, log_likelihood, rollout_mean
from .utils import LOG, _check_type, make_rng, read_json, spawn_seeds, write_json

TRAIN_MODES = ("vanilla", "learn", "oracle")
SIGMA2_POLICIES = ("fixed", "auto")
SIGMA2_FLOOR = 1e-8
POSTERIOR_INIT_DIAG = 1e-3
EVAL_CHUNK = 256


# ---------------------------------------------------------------------------
# posterior
# ---------------------------------------------------------------------------


def _factor(off: gc.Node, logdiag: gc.Node) -> gc.Node:
    n = logdiag.shape[0]
    strict = np.tril(np.ones((n, n)), -1)
    return off * strict + gc.exp(logdiag).reshape((n, 1)) * np.eye(n)


class LayerPosterior:
    """Matrix-normal posterior ``MN(M, S (x) A)`` of one augmented layer matrix.

    The factors ``L_S`` and ``L_A`` are lower triangular with a positive
    diagonal; they are stored as an unconstrained strictly-lower part plus the
    log of the diagonal.

    Parameters
    ----------
    mean : array_like or Node
        ``(out, in + 1)`` mean.

    s_off, s_logdiag : array_like or Node
        Row factor, ``(out, out)`` and ``(out,)``.

    a_off, a_logdiag : array_like or Node
        Column factor, ``(in + 1, in + 1)`` and ``(in + 1,)``.
    """

    def __init__(
        self,
        mean: Any,
        s_off: Any,
        s_logdiag: Any,
        a_off: Any,
        a_logdiag: Any,
    ) -> None:
        """Initialize the posterior."""
        self.mean = gc.as_node(mean)
        self.s_off = gc.as_node(s_off)
        self.s_logdiag = gc.as_node(s_logdiag)
        self.a_off = gc.as_node(a_off)
        self.a_logdiag = gc.as_node(a_logdiag)
        out, cols = self.mean.shape
        if self.s_off.shape != (out, out) or self.s_logdiag.shape != (out,):
            raise ShapeError(f"Row factor must be ({out}, {out}) with {out} diagonal entries.")
        if self.a_off.shape != (cols, cols) or self.a_logdiag.shape != (cols,):
            raise ShapeError(
                f"Column factor must be ({cols}, {cols}) with {cols} diagonal entries."
            )

    def __repr__(self) -> str:
        """Return a short description."""
        return f"LayerPosterior(out={self.out_dim}, in={self.in_dim})"

    @classmethod
    def initialize(
        cls, out: int, inp: int, rng: Any = None, diag: float = POSTERIOR_INIT_DIAG
    ) -> "LayerPosterior":
        """Fan-in scaled normal mean, zero bias and factors ``diag * I``."""
        rng = make_rng(rng)
        weights = rng.standard_normal((out, inp)) / math.sqrt(inp)
        mean = np.concatenate([weights, np.zeros((out, 1))], axis=1)
        return cls(
            mean,
            np.zeros((out, out)),
            np.full(out, math.log(diag)),
            np.zeros((inp + 1, inp + 1)),
            np.full(inp + 1, math.log(diag)),
        )

    @classmethod
    def from_factors(cls, mean: Any, l_s: Any, l_a: Any) -> "LayerPosterior":
        """Build a posterior from its mean and lower-triangular factors."""
        l_s = np.asarray(l_s, dtype=np.float64)
        l_a = np.asarray(l_a, dtype=np.float64)
        for name, mat in (("L_S", l_s), ("L_A", l_a)):
            if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
                raise ShapeError(f"``{name}`` must be square, got {mat.shape}.")
            if np.any(np.triu(mat, 1)):
                raise DomainError(f"``{name}`` must be lower triangular.")
            if np.any(np.diag(mat) <= 0):
                raise DomainError(f"``{name}`` must have a positive diagonal.")
        return cls(
            mean,
            np.tril(l_s, -1),
            np.log(np.diag(l_s)),
            np.tril(l_a, -1),
            np.log(np.diag(l_a)),
        )

    @property
    def out_dim(self) -> int:
        """Return ``out``."""
        return int(self.mean.shape[0])

    @property
    def in_dim(self) -> int:
        """Return ``in`` (without the bias column)."""
        return int(self.mean.shape[1] - 1)

    @property
    def n_weights(self) -> int:
        """Return ``D = out (in + 1)``."""
        return int(self.mean.size)

    def parameters(self) -> List[gc.Node]:
        """Return the five parameter nodes in a fixed order."""
        return [self.mean, self.s_off, self.s_logdiag, self.a_off, self.a_logdiag]

    def as_variables(self) -> "LayerPosterior":
        """Return a copy whose parameters are differentiable leaves."""
        return LayerPosterior(*[gc.variable(p.value) for p in self.parameters()])

    def with_values(self, values: Sequence[np.ndarray]) -> "LayerPosterior":
        """Return a copy with new parameter values in :meth:`parameters` order."""
        return LayerPosterior(*values)

    def l_s(self) -> gc.Node:
        """Return the row factor ``L_S``."""
        return _factor(self.s_off, self.s_logdiag)

    def l_a(self) -> gc.Node:
        """Return the column factor ``L_A``."""
        return _factor(self.a_off, self.a_logdiag)

    def to_dict(self) -> Dict[str, Any]:
        """Return the mean and the factors as nested lists."""
        return {
            "mean": self.mean.value.tolist(),
            "l_s": self.l_s().value.tolist(),
            "l_a": self.l_a().value.tolist(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "LayerPosterior":
        """Build a posterior from :meth:`to_dict` output."""
        return cls.from_factors(data["mean"], data["l_s"], data["l_a"])


def weights_from_noise(post: LayerPosterior, noise: Any) -> gc.Node:
    """Return ``M + L_S E L_A^T`` for a standard normal ``E``."""
    return post.mean + post.l_s() @ gc.as_node(noise) @ post.l_a().T


def sample_weights(post: LayerPosterior, rng: Any) -> gc.Node:
    """Draw one reparameterised augmented weight matrix from ``post``."""
    _check_type(post, "post", [LayerPosterior])
    rng = make_rng(rng)
    return weights_from_noise(post, rng.standard_normal(post.mean.shape))


def _trace_product(post: LayerPosterior) -> gc.Node:
    # Tr(S) Tr(A) = |L_S|_F^2 |L_A|_F^2
    l_s, l_a = post.l_s(), post.l_a()
    return (l_s * l_s).sum() * (l_a * l_a).sum()


def _log_det(post: LayerPosterior) -> gc.Node:
    # log |S (x) A| = (in + 1) log|S| + out log|A|
    cols, out = post.in_dim + 1, post.out_dim
    return post.s_logdiag.sum() * (2.0 * cols) + post.a_logdiag.sum() * (2.0 * out)


def prior_variance_star(post: LayerPosterior) -> float:
    """Return ``v* = (Tr(S) Tr(A) + |M|_F^2) / D``, the KL-minimising prior variance."""
    _check_type(post, "post", [LayerPosterior])
    total = _trace_product(post).item() + float(np.sum(post.mean.value**2))
    return total / post.n_weights


def kl_auto(post: LayerPosterior) -> gc.Node:
    """KL divergence from ``post`` to the isotropic prior with variance ``v*``.

    Returns a scalar node, differentiable in the posterior parameters.
    """
    _check_type(post, "post", [LayerPosterior])
    dim = post.n_weights
    total = _trace_product(post) + (post.mean * post.mean).sum()
    return (gc.log(total) * dim - dim * math.log(dim) - _log_det(post)) * 0.5


def kl_gaussian(post: LayerPosterior, variance: float) -> float:
    """KL divergence from ``post`` to the isotropic prior with the given variance."""
    if not variance > 0:
        raise DomainError(f"Prior variance must be strictly positive, got {variance}.")
    dim = post.n_weights
    total = _trace_product(post).item() + float(np.sum(post.mean.value**2))
    return 0.5 * (
        total / variance - dim + dim * math.log(variance) - _log_det(post).item()
    )


# ---------------------------------------------------------------------------
# output variance
# ---------------------------------------------------------------------------


@dataclass
class OutputVariance:
    """Data noise ``sigma^2``, fixed or tracked by an exponential moving average."""

    policy: str = "fixed"
    value: float = 1e-2
    decay: float = 0.9
    frozen: bool = False

    def __post_init__(self) -> None:
        """Validate the policy."""
        if self.policy not in SIGMA2_POLICIES:
            raise PreconditionError(
                f"Unsupported output variance policy {self.policy!r}, expected one of {SIGMA2_POLICIES}."
            )
        if not self.value > 0:
            raise DomainError(f"Output variance must be strictly positive, got {self.value}.")
        if not 0 < self.decay < 1:
            raise DomainError(f"``decay`` must lie in (0, 1), got {self.decay}.")


def update_output_variance(state: OutputVariance, residuals: Any) -> float:
    """Move ``sigma^2`` towards the mean of the squared ``residuals``.

    ``sigma^2 <- decay sigma^2 + (1 - decay) mean(residuals)``, floored at
    ``1e-8``. Fixed or frozen states keep their value.
    """
    _check_type(state, "state", [OutputVariance])
    if state.policy == "fixed" or state.frozen:
        return state.value
    batch = float(np.mean(np.asarray(residuals, dtype=np.float64)))
    state.value = max(state.decay * state.value + (1.0 - state.decay) * batch, SIGMA2_FLOOR)
    return state.value


# ---------------------------------------------------------------------------
# configuration and checkpoint
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    """Training settings.

    ``batch_traj`` is the number of trajectories per mini-batch, None for
    full-batch training. ``pair_chunk`` bounds the pairs rolled out on one
    gradient tape, None for the whole slice. ``sigma2`` is the fixed output variance, or the
    starting value of the moving average when ``sigma2_policy`` is ``auto``.
    """

    mode: str = "learn"
    k: int = 3
    n_tau: int = 100
    n_weight_samples: int = 2
    batch_traj: Optional[int] = 20
    pair_chunk: Optional[int] = 8
    epochs: int = 2000
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    n_steps: int = DEFAULT_EULER_STEPS
    sigma2_policy: str = "auto"
    sigma2: float = 1e-2
    sigma2_decay: float = 0.9
    sigma2_freeze_fraction: float = 0.1
    tau_measure: str = "normal"
    tau_lo: float = 0.0
    tau_hi: float = 2.0 * math.pi
    resample_tau_per_step: bool = False
    eval_tau: int = 100
    max_skip_fraction: float = 0.01
    posterior_init_diag: float = POSTERIOR_INIT_DIAG
    eta_init_std: float = 0.01
    seed: int = 0
    threads: int = 1

    def __post_init__(self) -> None:
        """Validate the settings."""
        if self.mode not in TRAIN_MODES:
            raise PreconditionError(
                f"Unsupported training mode {self.mode!r}, expected one of {TRAIN_MODES}."
            )
        for name in ("n_tau", "n_weight_samples", "n_steps", "eval_tau", "threads"):
            if getattr(self, name) < 1:
                raise PreconditionError(f"``{name}`` must be positive, got {getattr(self, name)}.")
        if self.k < 0 or self.epochs < 0:
            raise PreconditionError("``k`` and ``epochs`` must be non-negative.")
        if self.batch_traj is not None and self.batch_traj < 1:
            raise PreconditionError(f"``batch_traj`` must be positive, got {self.batch_traj}.")
        if self.pair_chunk is not None and self.pair_chunk < 1:
            raise PreconditionError(f"``pair_chunk`` must be positive, got {self.pair_chunk}.")
        if not self.lr > 0:
            raise DomainError(f"``lr`` must be strictly positive, got {self.lr}.")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise DomainError("Adam betas must lie in [0, 1).")
        if not 0 <= self.sigma2_freeze_fraction <= 1:
            raise DomainError("``sigma2_freeze_fraction`` must lie in [0, 1].")
        self.output_variance()
        self.measure()

    def measure(self) -> TauMeasure:
        """Return the symmetry-time measure."""
        return TauMeasure(self.tau_measure, self.tau_lo, self.tau_hi)

    def output_variance(self) -> OutputVariance:
        """Return a fresh output variance state."""
        return OutputVariance(self.sigma2_policy, self.sigma2, self.sigma2_decay)

    def effective_k(self) -> int:
        """Return the bank size used by the mode (zero for vanilla)."""
        return 0 if self.mode == "vanilla" else self.k

    def to_dict(self) -> Dict[str, Any]:
        """Return the settings as plain python."""
        return asdict(self)


@dataclass
class Checkpoint:
    """Trained posteriors, bank and bookkeeping."""

    arch: MLPArchitecture
    posteriors: List[LayerPosterior]
    bank: SymmetryBank
    sigma2: float
    config: TrainConfig
    spec: Optional[SystemSpec] = None
    dt: Optional[float] = None
    curves: Dict[str, List[float]] = field(default_factory=dict)
    train_mse: Optional[float] = None
    run_config: Dict[str, Any] = field(default_factory=dict)

    @property
    def prior_variances(self) -> List[float]:
        """Return ``v*`` per layer."""
        return [prior_variance_star(post) for post in self.posteriors]

    @property
    def epochs_completed(self) -> int:
        """Return the number of recorded epochs."""
        return len(self.curves.get("neg_elbo", []))

    def mean_parameters(self) -> MLPParameters:
        """Return the network at the posterior means."""
        return MLPParameters(self.arch, [post.mean.value for post in self.posteriors])

    def final_metrics(self) -> Dict[str, Optional[float]]:
        """Return Train MSE, NLL/N, KL/N and -ELBO/N of the last epoch."""
        last = {
            key: (self.curves[key][-1] if self.curves.get(key) else None)
            for key in ("nll", "kl", "neg_elbo")
        }
        return {"train_mse": self.train_mse, **last}

    def to_dict(self) -> Dict[str, Any]:
        """Return the serialisable document (without ``schema_version``)."""
        return {
            "architecture": self.arch.to_dict(),
            "posteriors": [post.to_dict() for post in self.posteriors],
            "bank": self.bank.to_dict(),
            "sigma2": self.sigma2,
            "prior_variances": self.prior_variances,
            "system": None if self.spec is None else self.spec.to_dict(),
            "dt": self.dt,
            "train": self.config.to_dict(),
            "curves": self.curves,
            "train_mse": self.train_mse,
            "seed": self.config.seed,
            "config": self.run_config,
        }

    @classmethod
    def from_dict(cls, document: Dict[str, Any]) -> "Checkpoint":
        """Build a checkpoint from :meth:`to_dict` output."""
        system = document.get("system")
        return cls(
            arch=MLPArchitecture.from_dict(document["architecture"]),
            posteriors=[LayerPosterior.from_dict(p) for p in document["posteriors"]],
            bank=SymmetryBank.from_dict(document["bank"]),
            sigma2=float(document["sigma2"]),
            config=TrainConfig(**document["train"]),
            spec=None if system is None else SystemSpec.from_dict(system),
            dt=document.get("dt"),
            curves={k: list(v) for k, v in document.get("curves", {}).items()},
            train_mse=document.get("train_mse"),
            run_config=document.get("config") or {},
        )

    def save(self, path: str) -> None:
        """Write the checkpoint as a JSON artifact."""
        write_json(path, self.to_dict())

    @classmethod
    def load(cls, path: str) -> "Checkpoint":
        """Read a checkpoint JSON artifact."""
        return cls.from_dict(read_json(path))


# ---------------------------------------------------------------------------
# ELBO
# ---------------------------------------------------------------------------


@dataclass
class ElboEstimate:
    """One mini-batch estimate of the ELBO and its gradients.

    ``nll`` and ``kl`` are the full-data negative log-likelihood and KL terms,
    so ``elbo = -(nll + kl)``. ``grads`` are gradients of ``-elbo`` in the
    order of the parameters passed to :func:`elbo_minibatch`.
    """

    elbo: float
    nll: float
    kl: float
    grads: List[np.ndarray]
    skipped: List[int]
    n_pairs: int
    residual: float


def _draw_taus(config: TrainConfig, k: int, rng: np.random.Generator) -> Optional[np.ndarray]:
    if k == 0:
        return None
    if config.resample_tau_per_step:
        return np.stack(
            [sample_tau(config.measure(), k, config.n_tau, rng) for _ in range(config.n_steps)]
        )
    return sample_tau(config.measure(), k, config.n_tau, rng)


def _bank_parameters(bank: SymmetryBank) -> List[gc.Node]:
    if bank.trainable and bank.n_quantities:
        return [bank.raw_a, bank.b]
    return []


def _rollout_skipping(
    theta: MLPParameters,
    bank: SymmetryBank,
    x_t: np.ndarray,
    dt: float,
    n_steps: int,
    taus: Optional[np.ndarray],
) -> Tuple[Optional[gc.Node], np.ndarray, List[int]]:
    # drop diverging rows and rerun on the rest
    active = np.arange(x_t.shape[0])
    skipped: List[int] = []
    while active.size:
        try:
            return rollout_mean(theta, bank, x_t[active], dt, n_steps, taus), active, skipped
        except DivergenceError as exc:
            bad = active[exc.rows]
            LOG.warning(
                "skipping %d diverging pairs at Euler step %d", bad.size, exc.step
            )
            skipped.extend(int(i) for i in bad)
            active = np.delete(active, exc.rows)
    return None, active, skipped


def elbo_minibatch(
    batch: Dataset,
    posteriors: Sequence[LayerPosterior],
    bank: SymmetryBank,
    config: TrainConfig,
    rng: Any,
    arch: Optional[MLPArchitecture] = None,
    n_total: Optional[int] = None,
    sigma2: Optional[float] = None,
    pool: Optional[ThreadPoolExecutor] = None,
) -> ElboEstimate:
    """Estimate the ELBO on a slice of the data together with its gradients.

    The likelihood term is rescaled by ``n_total / len(batch)`` and averaged
    over ``config.n_weight_samples`` weight samples, each with fresh weights
    and symmetry times. Pairs whose rollout diverges are skipped and the
    term is rescaled over the remaining pairs.

    Parameters
    ----------
    batch : Dataset
        Non-empty slice of the training pairs.

    posteriors : sequence of LayerPosterior
        One posterior per layer; their parameters receive gradients.

    bank : SymmetryBank
        Conserved quantities; a trainable non-empty bank receives gradients
        after the posterior parameters.

    config : TrainConfig
        Sampling settings.

    rng : numpy.random.Generator or int
        Source of weight noise and symmetry times.

    arch : MLPArchitecture, optional
        Network layout, inferred from the posteriors when omitted.

    n_total : int, optional
        Size ``N`` of the full dataset, ``len(batch)`` by default.

    sigma2 : float, optional
        Output variance, ``config.sigma2`` by default.

    pool : concurrent.futures.ThreadPoolExecutor, optional
        Evaluate weight samples concurrently. Results are reduced in sample
        order.

    Notes
    -----
    Each weight sample rolls the pairs out ``config.pair_chunk`` at a time
    and back-propagates every chunk on its own tape, so peak memory follows
    the chunk size rather than the slice size.
    """
    if batch.n_pairs == 0:
        raise PreconditionError("Cannot estimate the ELBO on an empty slice.")
    rng = make_rng(rng)
    n_total = batch.n_pairs if n_total is None else int(n_total)
    sigma2 = config.sigma2 if sigma2 is None else float(sigma2)
    if arch is None:
        hidden = tuple(post.out_dim for post in posteriors[:-1])
        arch = MLPArchitecture(posteriors[0].in_dim, hidden, alpha=1.0)
    post_vars = [post.as_variables() for post in posteriors]
    bank_vars = bank.as_variables() if _bank_parameters(bank) else bank
    wrt = [node for post in post_vars for node in post.parameters()]
    wrt += _bank_parameters(bank_vars)
    n_samples = config.n_weight_samples
    chunk = batch.n_pairs if config.pair_chunk is None else config.pair_chunk
    draws = []
    for _ in range(n_samples):
        noise = [rng.standard_normal(post.mean.shape) for post in posteriors]
        draws.append((noise, _draw_taus(config, bank.n_quantities, rng)))

    def _sample_term(index: int) -> Tuple[float, List[np.ndarray], List[int], float]:
        noise, taus = draws[index]
        layers = [weights_from_noise(post, e) for post, e in zip(post_vars, noise)]
        theta = MLPParameters(arch, layers)
        lik_sum = 0.0
        grads = [np.zeros(node.shape) for node in wrt]
        skipped: List[int] = []
        sq_err = 0.0
        n_active = 0
        # one tape per chunk of pairs; the scale needs the active count of all chunks
        for start in range(0, batch.n_pairs, chunk):
            pred, active, chunk_skipped = _rollout_skipping(
                theta, bank_vars, batch.x_t[start : start + chunk], batch.dt, config.n_steps, taus
            )
            skipped.extend(start + i for i in chunk_skipped)
            if pred is None:
                continue
            target = batch.x_tp[start + active]
            lik = log_likelihood(pred, target, sigma2).sum()
            grads = [acc + g for acc, g in zip(grads, gc.backward(-lik, wrt))]
            lik_sum += lik.item()
            sq_err += float(np.sum((pred.value - target) ** 2))
            n_active += active.size
        if not n_active:
            return 0.0, grads, skipped, 0.0
        scale = n_total / (n_active * n_samples)
        residual = sq_err / (n_active * batch.phase_dim)
        return lik_sum * scale, [g * scale for g in grads], skipped, residual

    if pool is None:
        terms = [_sample_term(i) for i in range(n_samples)]
    else:
        terms = list(pool.map(_sample_term, range(n_samples)))

    kl = kl_auto(post_vars[0])
    for post in post_vars[1:]:
        kl = kl + kl_auto(post)
    grads = gc.backward(kl, wrt)
    lik_total = 0.0
    skipped: List[int] = []
    for lik, sample_grads, sample_skipped, _ in terms:
        lik_total += lik
        grads = [acc + g for acc, g in zip(grads, sample_grads)]
        skipped.extend(sample_skipped)
    residual = float(np.mean([term[3] for term in terms]))
    kl_value = kl.item()
    return ElboEstimate(
        elbo=lik_total - kl_value,
        nll=-lik_total,
        kl=kl_value,
        grads=grads,
        skipped=sorted(set(skipped)),
        n_pairs=batch.n_pairs,
        residual=residual,
    )


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------


class Adam:
    """Adam with a learning rate cosine-annealed from ``lr`` to 0.

    Parameters
    ----------
    shapes : sequence of tuple
        Shapes of the parameters, in the order gradients are passed.

    lr : float
        Starting learning rate.

    total_steps : int
        Number of steps over which the rate anneals to zero.
    """

    def __init__(
        self,
        shapes: Sequence[Tuple[int, ...]],
        lr: float,
        total_steps: int,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ) -> None:
        """Initialize the moment estimates."""
        self.base_lr = lr
        self.total_steps = max(int(total_steps), 1)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros(shape) for shape in shapes]
        self.v = [np.zeros(shape) for shape in shapes]

    def learning_rate(self) -> float:
        """Return the rate of the next step."""
        progress = min(self.t / self.total_steps, 1.0)
        return 0.5 * self.base_lr * (1.0 + math.cos(math.pi * progress))

    def step(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> List[np.ndarray]:
        """Return the parameters after one descent step on ``grads``."""
        lr = self.learning_rate()
        self.t += 1
        out = []
        for i, (param, grad) in enumerate(zip(params, grads)):
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * grad
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * grad**2
            m_hat = self.m[i] / (1 - self.beta1**self.t)
            v_hat = self.v[i] / (1 - self.beta2**self.t)
            out.append(param - lr * m_hat / (np.sqrt(v_hat) + self.eps))
        return out


def initial_bank(
    config: TrainConfig, m: int, spec: Optional[SystemSpec], rng: Any = None
) -> SymmetryBank:
    """Return the starting bank of a training mode.

    ``vanilla`` has no observables, ``learn`` draws ``config.k`` near-zero
    ones and ``oracle`` freezes the ground-truth observables of ``spec``.
    """
    if config.mode == "vanilla":
        return SymmetryBank.empty(m)
    if config.mode == "oracle":
        from .analysis import (  # pylint: disable=import-outside-toplevel
            ground_truth_quantities,
        )

        if spec is None:
            raise PreconditionError("Oracle training needs the system specification.")
        _, quantities = ground_truth_quantities(spec)
        return SymmetryBank.from_quantities(quantities, trainable=False)
    return SymmetryBank.initialize(config.k, m, rng, std=config.eta_init_std)


def _unpack(
    posteriors: Sequence[LayerPosterior], bank: SymmetryBank, values: Sequence[np.ndarray]
) -> Tuple[List[LayerPosterior], SymmetryBank]:
    out = []
    for i, post in enumerate(posteriors):
        out.append(post.with_values(values[5 * i : 5 * i + 5]))
    rest = values[5 * len(posteriors) :]
    if rest:
        bank = SymmetryBank(rest[0], rest[1], trainable=bank.trainable)
    return out, bank


def train(
    dataset: Dataset,
    config: TrainConfig,
    arch: MLPArchitecture,
    spec: Optional[SystemSpec] = None,
    run_config: Optional[Dict[str, Any]] = None,
) -> Checkpoint:
    """Fit the posteriors (and the bank in ``learn`` mode) by maximising the ELBO.

    Parameters
    ----------
    dataset : Dataset
        Training pairs.

    config : TrainConfig
        Training settings, including the mode and the seed.

    arch : MLPArchitecture
        Network layout; its input size must match the dataset.

    spec : SystemSpec, optional
        Ground-truth system for ``oracle`` mode, ``dataset.spec`` by default.

    run_config : dict, optional
        Resolved run configuration echoed into the checkpoint.

    Returns
    -------
    Checkpoint
        Final state with per-epoch curves of NLL/N, KL/N and -ELBO/N.

    Raises
    ------
    TrainingAborted
        When the parameters or the objective become non-finite, or too many
        pairs of one epoch diverge. The exception carries the last good
        checkpoint.
    """
    _check_type(dataset, "dataset", [Dataset])
    _check_type(config, "config", [TrainConfig])
    if arch.input_dim != dataset.phase_dim:
        raise ShapeError(
            f"Architecture input size {arch.input_dim} does not match the data "
            f"phase dimension {dataset.phase_dim}."
        )
    spec = dataset.spec if spec is None else spec
    LOG.debug("train start: mode=%s epochs=%d", config.mode, config.epochs)
    init_seed, batch_seed, sample_seed = spawn_seeds(config.seed, 3)
    init_rng = make_rng(init_seed)
    batch_rng = make_rng(batch_seed)
    sample_rng = make_rng(sample_seed)
    posteriors = [
        LayerPosterior.initialize(out, inp, init_rng, config.posterior_init_diag)
        for out, inp in arch.layer_shapes
    ]
    bank = initial_bank(config, dataset.phase_dim, spec, init_rng)
    noise = config.output_variance()
    curves: Dict[str, List[float]] = {
        "neg_elbo": [],
        "nll": [],
        "kl": [],
        "sigma2": [],
        "skipped": [],
    }

    def _checkpoint(posts: List[LayerPosterior], current: SymmetryBank) -> Checkpoint:
        return Checkpoint(
            arch=arch,
            posteriors=posts,
            bank=current,
            sigma2=noise.value,
            config=config,
            spec=spec,
            dt=dataset.dt,
            curves={key: list(val) for key, val in curves.items()},
            run_config=dict(run_config or {}),
        )

    traj_ids = dataset.trajectory_ids()
    per_batch = len(traj_ids) if config.batch_traj is None else config.batch_traj
    n_batches = int(math.ceil(len(traj_ids) / per_batch))
    values = [p.value for post in posteriors for p in post.parameters()]
    values += [p.value for p in _bank_parameters(bank)]
    optimizer = Adam(
        [v.shape for v in values],
        config.lr,
        config.epochs * n_batches,
        config.beta1,
        config.beta2,
        config.adam_eps,
    )
    freeze_epoch = int(math.ceil(config.epochs * (1.0 - config.sigma2_freeze_fraction)))
    pool = ThreadPoolExecutor(config.threads) if config.threads > 1 else None
    try:
        for epoch in range(config.epochs):
            noise.frozen = epoch >= freeze_epoch
            order = batch_rng.permutation(traj_ids)
            sums = {"nll": 0.0, "kl": 0.0}
            skipped = 0
            for start in range(0, len(order), per_batch):
                batch = dataset.subset(order[start : start + per_batch])
                estimate = elbo_minibatch(
                    batch,
                    posteriors,
                    bank,
                    config,
                    sample_rng,
                    arch=arch,
                    n_total=dataset.n_pairs,
                    sigma2=noise.value,
                    pool=pool,
                )
                skipped += len(estimate.skipped)
                new_values = optimizer.step(values, estimate.grads)
                finite = np.isfinite(estimate.elbo) and all(
                    np.all(np.isfinite(v)) for v in new_values
                )
                if not finite:
                    raise TrainingAborted(
                        f"Non-finite parameters at epoch {epoch}",
                        diagnostics={"epoch": epoch, "elbo": estimate.elbo},
                        checkpoint=_checkpoint(posteriors, bank),
                    )
                values = new_values
                posteriors, bank = _unpack(posteriors, bank, values)
                update_output_variance(noise, estimate.residual)
                sums["nll"] += estimate.nll / n_batches
                sums["kl"] += estimate.kl / n_batches
            if skipped > config.max_skip_fraction * dataset.n_pairs:
                raise TrainingAborted(
                    f"{skipped} of {dataset.n_pairs} pairs diverged in epoch {epoch}",
                    diagnostics={"epoch": epoch, "skipped": skipped},
                    checkpoint=_checkpoint(posteriors, bank),
                )
            nll = sums["nll"] / dataset.n_pairs
            kl = sums["kl"] / dataset.n_pairs
            curves["nll"].append(nll)
            curves["kl"].append(kl)
            curves["neg_elbo"].append(nll + kl)
            curves["sigma2"].append(noise.value)
            curves["skipped"].append(float(skipped))
            LOG.info(
                "epoch %d: -ELBO/N=%.6g NLL/N=%.6g KL/N=%.6g sigma2=%.3g",
                epoch,
                nll + kl,
                nll,
                kl,
                noise.value,
            )
    finally:
        if pool is not None:
            pool.shutdown()
    if bank.n_quantities > 1:
        LOG.info("pairwise bracket residual of the bank: %.3g", bracket_residual(bank))
    checkpoint = _checkpoint(posteriors, bank.frozen() if config.mode == "oracle" else bank)
    checkpoint.train_mse = evaluate(checkpoint, dataset, n_tau=config.n_tau)
    LOG.debug("train stop")
    return checkpoint


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def _eval_taus(checkpoint: Checkpoint, n_tau: Optional[int], seed: Optional[int]) -> Optional[np.ndarray]:
    k = checkpoint.bank.n_quantities
    if k == 0:
        return None
    n_tau = checkpoint.config.eval_tau if n_tau is None else n_tau
    seed = checkpoint.config.seed if seed is None else seed
    return sample_tau(checkpoint.config.measure(), k, n_tau, make_rng(seed))


def _predict(checkpoint: Checkpoint, x_t: np.ndarray, dt: float, taus: Optional[np.ndarray]) -> np.ndarray:
    theta = checkpoint.mean_parameters()
    out = []
    for start in range(0, x_t.shape[0], EVAL_CHUNK):
        pred = rollout_mean(
            theta,
            checkpoint.bank,
            x_t[start : start + EVAL_CHUNK],
            dt,
            checkpoint.config.n_steps,
            taus,
        )
        out.append(np.array(pred.value))
    return np.concatenate(out, axis=0)


def _check_phase(checkpoint: Checkpoint, dataset: Dataset) -> None:
    if dataset.phase_dim != checkpoint.arch.input_dim:
        raise ShapeError(
            f"Checkpoint expects phase dimension {checkpoint.arch.input_dim}, "
            f"the data has {dataset.phase_dim}."
        )


def evaluate(
    checkpoint: Checkpoint,
    dataset: Dataset,
    n_tau: Optional[int] = None,
    seed: Optional[int] = None,
) -> float:
    """One-step MSE at the posterior-mean weights.

    One pool of ``n_tau`` symmetry times, drawn from ``seed``, is shared by all
    pairs. Both default to the checkpoint's training settings.
    """
    _check_type(checkpoint, "checkpoint", [Checkpoint])
    _check_phase(checkpoint, dataset)
    taus = _eval_taus(checkpoint, n_tau, seed)
    pred = _predict(checkpoint, dataset.x_t, dataset.dt, taus)
    return float(np.mean((pred - dataset.x_tp) ** 2))


def horizon_mse(
    checkpoint: Checkpoint,
    dataset: Dataset,
    horizon: int,
    n_tau: Optional[int] = None,
    seed: Optional[int] = None,
) -> List[float]:
    """MSE of chained predictions along each trajectory, one value per step.

    Every trajectory starts from its first state and is rolled forward
    ``horizon`` times; entry ``h`` compares the ``h + 1``-th prediction with
    the simulated state.
    """
    _check_type(checkpoint, "checkpoint", [Checkpoint])
    _check_phase(checkpoint, dataset)
    if horizon < 1:
        raise PreconditionError(f"``horizon`` must be at least 1, got {horizon}.")
    trajectories = dataset.trajectories()
    if min(len(traj) for traj in trajectories) < horizon + 1:
        raise PreconditionError(
            f"Every trajectory needs at least {horizon + 1} states for horizon {horizon}."
        )
    truth = np.stack([traj[: horizon + 1] for traj in trajectories])
    taus = _eval_taus(checkpoint, n_tau, seed)
    state = truth[:, 0]
    errors = []
    for step in range(1, horizon + 1):
        state = _predict(checkpoint, state, dataset.dt, taus)
        errors.append(float(np.mean((state - truth[:, step]) ** 2)))
    return errors


def importance_log_weights(
    dataset: Dataset,
    posteriors: Sequence[LayerPosterior],
    bank: SymmetryBank,
    config: TrainConfig,
    n_samples: int,
    rng: Any,
    sigma2: Optional[float] = None,
    arch: Optional[MLPArchitecture] = None,
) -> np.ndarray:
    """Log importance weights ``log p(D | w) + log p(w) - log q(w)`` for ``w ~ q``.

    The prior of each layer is the isotropic Gaussian with variance ``v*``.
    """
    if n_samples < 1:
        raise PreconditionError(f"``n_samples`` must be positive, got {n_samples}.")
    rng = make_rng(rng)
    sigma2 = config.sigma2 if sigma2 is None else sigma2
    if arch is None:
        hidden = tuple(post.out_dim for post in posteriors[:-1])
        arch = MLPArchitecture(posteriors[0].in_dim, hidden, alpha=1.0)
    weights = np.empty(n_samples)
    variances = [prior_variance_star(post) for post in posteriors]
    for i in range(n_samples):
        log_q = 0.0
        log_p = 0.0
        layers = []
        for post, var in zip(posteriors, variances):
            noise = rng.standard_normal(post.mean.shape)
            layer = weights_from_noise(post, noise).value
            layers.append(layer)
            dim = post.n_weights
            log_q += -0.5 * float(np.sum(noise**2)) - 0.5 * dim * math.log(2 * math.pi)
            log_q -= 0.5 * _log_det(post).item()
            log_p += -0.5 * float(np.sum(layer**2)) / var - 0.5 * dim * math.log(2 * math.pi * var)
        taus = _draw_taus(config, bank.n_quantities, rng)
        pred = rollout_mean(
            MLPParameters(arch, layers), bank, dataset.x_t, dataset.dt, config.n_steps, taus
        )
        log_lik = log_likelihood(pred, dataset.x_tp, sigma2).sum().item()
        weights[i] = log_lik + log_p - log_q
    return weights


def log_marginal_importance(
    dataset: Dataset,
    posteriors: Sequence[LayerPosterior],
    bank: SymmetryBank,
    config: TrainConfig,
    n_samples: int,
    seed: Any,
    sigma2: Optional[float] = None,
    arch: Optional[MLPArchitecture] = None,
) -> float:
    """Importance-sampled estimate of the log marginal likelihood, ``q`` as proposal."""
    logw = importance_log_weights(
        dataset, posteriors, bank, config, n_samples, seed, sigma2=sigma2, arch=arch
    )
    top = float(np.max(logw))
    return top + math.log(float(np.mean(np.exp(logw - top))))
