"""
This module contains the run configuration.

A run is described by a TOML document with the sections ``[system]``,
``[data]``, ``[architecture]``, ``[train]``, ``[analysis]`` and ``[output]``.
Named presets ship with the package; a user file and explicit overrides are
layered on top of a preset. Unknown sections and keys are rejected.

Examples
--------
>>> from noetherrazor.config import RunConfig
>>> config = RunConfig.from_preset("sho-desk")
>>> config.system_spec().label
'sho'
>>> config.train_config(epochs=0).epochs
0
"""
import dataclasses
import os
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Tuple

import toml  # type: ignore

from .analysis import ACTIVE_THRESHOLD
from .dynamics import DataRecipe, SystemSpec, recipe_for
from .errors import ConfigError
from .model import MLPArchitecture
from .utils import LOG
from .variational import TrainConfig

PRESET_DIR = os.path.join(os.path.dirname(__file__), "data", "presets")
DEFAULT_BODIES = 3


@dataclass(frozen=True)
class AnalysisConfig:
    """Settings of the symmetry analysis and of the field export."""

    threshold: float = ACTIVE_THRESHOLD
    field_tau: int = 200
    field_range: Tuple[float, float] = (-3.0, 3.0)
    field_resolution: int = 50
    test_tau: int = 100

    def __post_init__(self) -> None:
        """Validate the settings."""
        object.__setattr__(self, "field_range", tuple(float(v) for v in self.field_range))
        if len(self.field_range) != 2 or not self.field_range[0] < self.field_range[1]:
            raise ConfigError(f"``field_range`` must be (lo, hi) with lo < hi, got {self.field_range}.")
        if self.field_resolution < 1 or self.field_tau < 1 or self.test_tau < 1:
            raise ConfigError("Field resolution and tau counts must be positive.")


def _field_names(cls: Any) -> List[str]:
    return [f.name for f in dataclasses.fields(cls)]


_DATA_KEYS = ["n_traj", "points_per_traj", "dt", "shift_std", "offset", "substeps", "seed"]
SCHEMA: Dict[str, List[str]] = {
    "system": _field_names(SystemSpec),
    "data": _DATA_KEYS,
    "architecture": ["hidden", "alpha"],
    "train": _field_names(TrainConfig),
    "analysis": _field_names(AnalysisConfig),
    "output": ["directory"],
}


def _validate(document: Dict[str, Any], source: str) -> None:
    for section, values in document.items():
        if section not in SCHEMA:
            raise ConfigError(
                f"Unknown section [{section}] in {source}, expected one of {sorted(SCHEMA)}."
            )
        if not isinstance(values, dict):
            raise ConfigError(f"[{section}] in {source} must be a table.")
        unknown = sorted(set(values) - set(SCHEMA[section]))
        if unknown:
            raise ConfigError(f"Unknown keys {unknown} in [{section}] of {source}.")


def available_presets() -> List[str]:
    """Return the names of the shipped presets."""
    return sorted(
        name[: -len(".toml")] for name in os.listdir(PRESET_DIR) if name.endswith(".toml")
    )


@dataclass
class RunConfig:
    """Resolved configuration of one run, one dict per section."""

    sections: Dict[str, Dict[str, Any]] = dataclasses.field(default_factory=dict)

    def __post_init__(self) -> None:
        """Validate the sections."""
        _validate(self.sections, "configuration")
        for section in SCHEMA:
            self.sections.setdefault(section, {})

    @classmethod
    def from_dict(cls, document: Dict[str, Any], source: str = "configuration") -> "RunConfig":
        """Build a configuration from a parsed document."""
        _validate(document, source)
        return cls({key: dict(val) for key, val in document.items()})

    @classmethod
    def from_file(cls, path: str) -> "RunConfig":
        """Read a TOML file."""
        try:
            document = toml.load(path)
        except toml.TomlDecodeError as exc:
            raise ConfigError(f"Cannot parse {path}: {exc}") from exc
        return cls.from_dict(document, path)

    @classmethod
    def from_preset(cls, name: str) -> "RunConfig":
        """Read a shipped preset such as ``nbody-desk``."""
        path = os.path.join(PRESET_DIR, f"{name}.toml")
        if not os.path.isfile(path):
            raise ConfigError(
                f"Unknown preset {name!r}, expected one of {available_presets()}."
            )
        return cls.from_file(path)

    @classmethod
    def resolve(
        cls,
        preset: Optional[str] = None,
        path: Optional[str] = None,
        overrides: Optional[Dict[str, Dict[str, Any]]] = None,
    ) -> "RunConfig":
        """Layer a file over a preset and explicit overrides over both."""
        config = cls.from_preset(preset) if preset else cls()
        if path:
            LOG.debug("layering %s over preset %s", path, preset)
            config = config.merged(cls.from_file(path).sections)
        if overrides:
            config = config.merged(overrides)
        return config

    def merged(self, other: Dict[str, Dict[str, Any]]) -> "RunConfig":
        """Return a copy with the non-None entries of ``other`` layered on top."""
        _validate(other, "overrides")
        out = {key: dict(val) for key, val in self.sections.items()}
        for section, values in other.items():
            out.setdefault(section, {}).update(
                {key: val for key, val in values.items() if val is not None}
            )
        return RunConfig(out)

    def to_dict(self) -> Dict[str, Dict[str, Any]]:
        """Return the sections as plain python."""
        return {key: dict(val) for key, val in self.sections.items()}

    def dumps(self) -> str:
        """Return the configuration as TOML text."""
        return toml.dumps(self.to_dict())

    def _build(self, cls: Any, section: str, **extra: Any) -> Any:
        try:
            return cls(**{**self.sections[section], **extra})
        except TypeError as exc:
            raise ConfigError(f"Invalid [{section}] section: {exc}") from exc

    def system_spec(self) -> SystemSpec:
        """Return the ground-truth system.

        An n-body system that does not set ``n`` has ``DEFAULT_BODIES`` bodies.
        """
        system = self.sections["system"]
        if system.get("kind") == "nbody" and "n" not in system:
            return self._build(SystemSpec, "system", n=DEFAULT_BODIES)
        return self._build(SystemSpec, "system")

    def seed(self) -> int:
        """Return the data seed, the training seed when not set."""
        data = self.sections["data"]
        return int(data.get("seed", self.sections["train"].get("seed", 0)))

    def recipe(self, variant: str = "train") -> DataRecipe:
        """Return the data recipe of ``variant``.

        The point and trajectory counts of ``[data]`` apply to the training
        split only; every split shares the time gap.
        """
        data = {k: v for k, v in self.sections["data"].items() if k != "seed"}
        if variant != "train":
            data.pop("n_traj", None)
            data.pop("points_per_traj", None)
            if variant in ("moved", "wider"):
                data.pop("shift_std", None)
                data.pop("offset", None)
        return recipe_for(self.system_spec(), variant, **data)

    def architecture(self, input_dim: Optional[int] = None) -> MLPArchitecture:
        """Return the network layout for the system's phase dimension."""
        dim = self.system_spec().phase_dim if input_dim is None else input_dim
        return self._build(MLPArchitecture, "architecture", input_dim=dim)

    def train_config(self, **overrides: Any) -> TrainConfig:
        """Return the training settings, with ``overrides`` that are not None.

        TOML has no null, so ``batch_traj = 0`` selects full-batch training and
        ``pair_chunk = 0`` rolls a whole mini-batch out on one tape.
        """
        values = {**self.sections["train"]}
        values.update({k: v for k, v in overrides.items() if v is not None})
        for key in ("batch_traj", "pair_chunk"):
            if values.get(key) == 0:
                values[key] = None
        try:
            return TrainConfig(**values)
        except TypeError as exc:
            raise ConfigError(f"Invalid [train] section: {exc}") from exc

    def analysis_config(self) -> AnalysisConfig:
        """Return the analysis settings."""
        return self._build(AnalysisConfig, "analysis")

    def output_directory(self) -> str:
        """Return the output directory, the working directory by default."""
        return str(self.sections["output"].get("directory", "."))
