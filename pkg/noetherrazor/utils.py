"""This module contains utilities routines."""

import csv
import json
import logging
import os
from typing import Any, Dict, Iterable, List, Optional, Sequence, Type

import numpy as np  # type: ignore

from .errors import DomainError

SCHEMA_VERSION = "1"

LOG = logging.getLogger("noetherrazor")
LOG.setLevel(logging.WARNING)
LOG.addHandler(logging.StreamHandler())


def _check_type(var: Any, var_name: str, var_types: List[Type[Any]]) -> None:
    types = tuple(var_types)
    if not isinstance(var, types):
        raise TypeError(
            f"Expected type for ``{var_name}`` is {str(types)}"
            f" but {type(var)} was given."
        )


def _check_finite(arr: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"``{name}`` contains non-finite entries.")


def _check_positive(value: float, name: str) -> None:
    if not value > 0:
        raise DomainError(f"``{name}`` must be strictly positive, got {value}.")


def make_rng(seed: Any) -> np.random.Generator:
    """Return a numpy generator for an int seed, a SeedSequence or a generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def spawn_seeds(seed: int, count: int) -> List[np.random.SeedSequence]:
    """Spawn ``count`` independent child seeds of ``seed``.

    Children only depend on ``seed`` and their index, so work scheduled on
    them gives the same result in any order.
    """
    return np.random.SeedSequence(seed).spawn(count)


def to_jsonable(obj: Any) -> Any:
    """Convert numpy containers to plain python for :mod:`json`."""
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, dict):
        return {str(key): to_jsonable(val) for key, val in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(val) for val in obj]
    return obj


def write_json(path: str, payload: Dict[str, Any]) -> None:
    """Write an artifact with ``schema_version`` first.

    Python's float repr round-trips 64-bit values, so no precision is lost.
    """
    document = {"schema_version": SCHEMA_VERSION}
    document.update(to_jsonable(payload))
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fid:
        json.dump(document, fid, indent=1, sort_keys=False)
        fid.write("\n")


def read_json(path: str) -> Dict[str, Any]:
    """Read an artifact and check its schema version."""
    with open(path, "r", encoding="utf-8") as fid:
        document = json.load(fid)
    version = document.get("schema_version")
    if version != SCHEMA_VERSION:
        raise DomainError(
            f"Unsupported schema_version {version!r} in {path}, "
            f"expected {SCHEMA_VERSION!r}."
        )
    return document


def metadata_path(path: str) -> str:
    """Return the sidecar JSON path of a tabular artifact."""
    return f"{path}.meta.json"


def write_csv(
    path: str,
    header: Sequence[str],
    rows: Iterable[Sequence[float]],
    metadata: Optional[Dict[str, Any]] = None,
) -> None:
    """Write a CSV with a header row and full round-trip float precision.

    The header is always the first line. ``metadata`` goes to the JSON
    sidecar at :func:`metadata_path`.
    """
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fid:
        writer = csv.writer(fid, lineterminator="\n")
        writer.writerow(list(header))
        for row in rows:
            writer.writerow([_format_cell(val) for val in row])
    if metadata is not None:
        write_json(metadata_path(path), metadata)


def _format_cell(val: Any) -> str:
    if isinstance(val, (int, np.integer)) and not isinstance(val, bool):
        return str(int(val))
    return repr(float(val))
