"""This module contains the environment report."""

from typing import Any, List, Optional

import scooby  # type: ignore


class Report(scooby.Report):
    """Versions of the packages this package runs on.

    Parameters
    ----------
    additional : list of str, optional
        Extra packages to report.

    ncol : int
        Number of package columns in the HTML table.

    text_width : int
        Width of the text report.
    """

    def __init__(
        self, additional: Optional[List[Any]] = None, ncol: int = 3, text_width: int = 80
    ) -> None:
        """Initialize the report."""
        core = ["noetherrazor", "numpy", "toml", "scooby"]
        optional = ["pyvista", "vtk", "pytest"]
        scooby.Report.__init__(
            self,
            additional=additional,
            core=core,
            optional=optional,
            ncol=ncol,
            text_width=text_width,
        )
