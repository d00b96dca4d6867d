"""Long-format panel data container shared by the fitting engine, CLI and simulation harness."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .spatial import AdjacencyGraph

__all__ = ["PanelData"]


@dataclass
class PanelData:
    """Counts, exposures and offsets observed over contiguous time series per spatial unit.

    Rows are sorted by (unit, t); ``unit_index`` codes units 0..J-1 in
    the order of ``units``. ``covariates`` holds extra fixed-effect
    columns (already numeric) keyed by name.
    """

    units: list
    unit_index: np.ndarray
    t_index: np.ndarray
    y: np.ndarray
    exposure: np.ndarray
    population: np.ndarray
    covariates: dict[str, np.ndarray] = field(default_factory=dict)
    graph: AdjacencyGraph | None = None

    def __post_init__(self):
        n = len(self.y)
        for name in ("unit_index", "t_index", "exposure", "population"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"panel column {name!r} has length {len(getattr(self, name))}, expected {n}")
        for name, col in self.covariates.items():
            if len(col) != n:
                raise ValueError(f"covariate {name!r} has length {len(col)}, expected {n}")

    @property
    def J(self) -> int:
        return len(self.units)

    @property
    def n_obs(self) -> int:
        return len(self.y)

    def series_lengths(self) -> np.ndarray:
        return np.bincount(self.unit_index, minlength=self.J)

    def exposure_range(self) -> tuple[float, float]:
        return float(self.exposure.min()), float(self.exposure.max())

    def unit_rows(self, code: int) -> np.ndarray:
        return np.flatnonzero(self.unit_index == code)

    def validate_contiguous(self) -> None:
        """Every unit's t_index must increase by exactly one per row."""
        for code in range(self.J):
            t = self.t_index[self.unit_rows(code)]
            if t.size == 0:
                raise ValueError(f"unit {self.units[code]!r} has no observations")
            if np.any(np.diff(t) != 1):
                raise ValueError(f"unit {self.units[code]!r} has a non-contiguous t_index")
