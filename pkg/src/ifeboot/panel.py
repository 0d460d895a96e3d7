"""Balanced binary-outcome panels: container, CSV I/O, validation, scaling."""

from __future__ import annotations

import csv
import os
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    DimensionMismatch,
    DuplicateCell,
    MissingCell,
    NonBinaryOutcome,
    NonFiniteCovariate,
    PanelError,
    ZeroVariance,
)

__all__ = [
    "PanelData",
    "PanelSchema",
    "StandardizationReport",
    "Violation",
    "DegenerateVariationWarning",
    "load_csv",
    "write_csv",
    "standardize",
    "validate",
    "degenerate_units",
    "degenerate_periods",
]


class DegenerateVariationWarning(UserWarning):
    """A unit or period has an outcome that never changes."""


@dataclass(frozen=True)
class PanelData:
    """Balanced N x T panel of binary outcomes with K covariates.

    Parameters
    ----------
    y : ndarray, shape (N, T)
        Outcomes, 0 or 1.
    x : ndarray, shape (K, N, T)
        Covariates; ``x[k]`` is the N x T matrix of the k-th regressor.
    unit_ids, period_ids : sequence, optional
        Original labels, kept for reporting. Default to ``range(N)`` and
        ``range(T)``.

    Notes
    -----
    Only the array shapes are checked at construction time; content checks
    (binary outcomes, finite covariates) live in :func:`validate` so that a
    malformed panel can still be inspected.
    """

    y: np.ndarray
    x: np.ndarray
    unit_ids: tuple = field(default=None)
    period_ids: tuple = field(default=None)

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        x = np.asarray(self.x, dtype=float)
        if y.ndim != 2:
            raise DimensionMismatch(f"y must be 2-D (N, T), got shape {y.shape}")
        if x.ndim == 2:
            x = x[None]
        if x.ndim != 3 or x.shape[1:] != y.shape:
            raise DimensionMismatch(f"x must have shape (K, {y.shape[0]}, {y.shape[1]}), got {x.shape}")
        y.setflags(write=False)
        x.setflags(write=False)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", x)
        units = tuple(range(y.shape[0])) if self.unit_ids is None else tuple(self.unit_ids)
        periods = tuple(range(y.shape[1])) if self.period_ids is None else tuple(self.period_ids)
        if len(units) != y.shape[0] or len(periods) != y.shape[1]:
            raise DimensionMismatch("label lists do not match panel dimensions")
        object.__setattr__(self, "unit_ids", units)
        object.__setattr__(self, "period_ids", periods)

    @property
    def n_units(self) -> int:
        return self.y.shape[0]

    @property
    def n_periods(self) -> int:
        return self.y.shape[1]

    @property
    def n_covariates(self) -> int:
        return self.x.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.y.shape

    def with_outcome(self, y: np.ndarray) -> "PanelData":
        """Copy of the panel with a new outcome matrix and the same covariates."""
        return PanelData(y, self.x, self.unit_ids, self.period_ids)

    def subpanel(self, units=slice(None), periods=slice(None)) -> "PanelData":
        """Restrict to a subset of units and/or periods (index arrays or slices)."""
        ui = np.arange(self.n_units)[units]
        ti = np.arange(self.n_periods)[periods]
        return PanelData(
            self.y[np.ix_(ui, ti)],
            self.x[:, ui][:, :, ti],
            [self.unit_ids[i] for i in ui],
            [self.period_ids[t] for t in ti],
        )

    def permute(self, unit_order=None, period_order=None) -> "PanelData":
        unit_order = np.arange(self.n_units) if unit_order is None else np.asarray(unit_order)
        period_order = np.arange(self.n_periods) if period_order is None else np.asarray(period_order)
        return self.subpanel(unit_order, period_order)

    def __eq__(self, other):
        if not isinstance(other, PanelData):
            return NotImplemented
        return (
            self.unit_ids == other.unit_ids
            and self.period_ids == other.period_ids
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.x, other.x)
        )

    __hash__ = None


@dataclass(frozen=True)
class PanelSchema:
    """Column mapping for long-format CSV files."""

    unit: str = "unit"
    period: str = "period"
    y: str = "y"
    x: tuple = ("x1",)
    delimiter: str = ","

    @classmethod
    def from_mapping(cls, m: Mapping) -> "PanelSchema":
        xs = m.get("x", ("x1",))
        if isinstance(xs, str):
            xs = tuple(s.strip() for s in xs.split(",") if s.strip())
        return cls(
            unit=m.get("unit", "unit"),
            period=m.get("period", "period"),
            y=m.get("y", "y"),
            x=tuple(xs),
            delimiter=m.get("delimiter", ","),
        )


def _sort_labels(labels: Iterable[str]) -> list[str]:
    labels = list(labels)
    try:
        keys = [float(s) for s in labels]
    except ValueError:
        return sorted(labels)
    return [s for _, s in sorted(zip(keys, labels))]


def load_csv(path: str | os.PathLike, schema: PanelSchema | Mapping | None = None) -> PanelData:
    """Read a long-format CSV (one row per unit-period) into a :class:`PanelData`.

    Units and periods are sorted (numerically when every label parses as a
    number, lexicographically otherwise) and re-indexed densely.

    Raises
    ------
    MissingCell, DuplicateCell, NonBinaryOutcome, NonFiniteCovariate
        When the file does not describe a complete, valid grid.
    """
    if schema is None:
        schema = PanelSchema()
    elif not isinstance(schema, PanelSchema):
        schema = PanelSchema.from_mapping(schema)

    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh, delimiter=schema.delimiter)
        if reader.fieldnames is None:
            raise PanelError(f"{path}: empty file")
        needed = [schema.unit, schema.period, schema.y, *schema.x]
        missing = [c for c in needed if c not in reader.fieldnames]
        if missing:
            raise PanelError(f"{path}: missing columns {missing}")
        rows = [(r[schema.unit], r[schema.period], r[schema.y], [r[c] for c in schema.x]) for r in reader]

    units = _sort_labels({r[0] for r in rows})
    periods = _sort_labels({r[1] for r in rows})
    uix = {u: i for i, u in enumerate(units)}
    tix = {p: t for t, p in enumerate(periods)}
    n, t_, k = len(units), len(periods), len(schema.x)

    y = np.zeros((n, t_))
    x = np.zeros((k, n, t_))
    seen = np.zeros((n, t_), dtype=bool)
    for u, p, yv, xv in rows:
        i, t = uix[u], tix[p]
        if seen[i, t]:
            raise DuplicateCell(u, p)
        seen[i, t] = True
        try:
            yf = float(yv)
        except ValueError:
            raise NonBinaryOutcome(u, p, yv) from None
        if yf not in (0.0, 1.0):
            raise NonBinaryOutcome(u, p, yv)
        y[i, t] = yf
        for j, s in enumerate(xv):
            try:
                val = float(s)
            except ValueError:
                val = np.nan
            if not np.isfinite(val):
                raise NonFiniteCovariate(u, p, j)
            x[j, i, t] = val
    if not seen.all():
        i, t = np.argwhere(~seen)[0]
        raise MissingCell(units[i], periods[t])
    return PanelData(y, x, units, periods)


def write_csv(data: PanelData, path: str | os.PathLike, schema: PanelSchema | Mapping | None = None) -> None:
    """Write ``data`` in long format; floats use ``repr`` so reading back is exact."""
    if schema is None:
        schema = PanelSchema(x=tuple(f"x{k + 1}" for k in range(data.n_covariates)))
    elif not isinstance(schema, PanelSchema):
        schema = PanelSchema.from_mapping(schema)
    if len(schema.x) != data.n_covariates:
        raise DimensionMismatch("schema names a different number of covariates than the panel has")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter=schema.delimiter)
        w.writerow([schema.unit, schema.period, schema.y, *schema.x])
        for i, u in enumerate(data.unit_ids):
            for t, p in enumerate(data.period_ids):
                w.writerow([u, p, int(data.y[i, t]), *(repr(float(v)) for v in data.x[:, i, t])])


@dataclass(frozen=True)
class StandardizationReport:
    """Centering and scaling constants applied by :func:`standardize`."""

    means: tuple
    sds: tuple
    skipped: frozenset

    def transformed(self) -> list[int]:
        return [k for k in range(len(self.means)) if k not in self.skipped]


def standardize(data: PanelData, skip: Iterable[int] = ()) -> tuple[PanelData, StandardizationReport]:
    """Center and scale covariates to mean 0 and standard deviation 1.

    The standard deviation uses the ``n - 1`` denominator over all N*T cells.
    Covariates listed in `skip` (typically dummies) are returned untouched.
    """
    skip = frozenset(int(k) for k in skip)
    x = np.array(data.x, copy=True)
    means, sds = [], []
    for k in range(data.n_covariates):
        if k in skip:
            means.append(0.0)
            sds.append(1.0)
            continue
        m = float(x[k].mean())
        s = float(x[k].std(ddof=1)) if x[k].size > 1 else 0.0
        if not s > 0:
            raise ZeroVariance(k)
        x[k] = (x[k] - m) / s
        means.append(m)
        sds.append(s)
    return PanelData(data.y, x, data.unit_ids, data.period_ids), StandardizationReport(tuple(means), tuple(sds), skip)


@dataclass(frozen=True)
class Violation:
    kind: str
    unit: object = None
    period: object = None
    k: int | None = None
    value: object = None

    def __str__(self):
        loc = ", ".join(f"{n}={v!r}" for n, v in (("unit", self.unit), ("period", self.period), ("k", self.k)) if v is not None)
        return f"{self.kind}({loc})"


def degenerate_units(y: np.ndarray) -> np.ndarray:
    """Indices of rows of `y` whose outcome never varies."""
    y = np.asarray(y)
    return np.flatnonzero(y.var(axis=1) == 0)


def degenerate_periods(y: np.ndarray) -> np.ndarray:
    y = np.asarray(y)
    return np.flatnonzero(y.var(axis=0) == 0)


def validate(data: PanelData) -> list[Violation]:
    """Check the content invariants of a panel.

    Returns one :class:`Violation` per offending cell; an empty list means the
    panel is usable. Units or periods whose outcome never varies are not
    violations, but they trigger a :class:`DegenerateVariationWarning`.
    """
    out: list[Violation] = []
    y, x = data.y, data.x
    for i, t in np.argwhere(~np.isin(y, (0.0, 1.0))):
        out.append(Violation("NonBinaryOutcome", data.unit_ids[i], data.period_ids[t], value=y[i, t]))
    for k, i, t in np.argwhere(~np.isfinite(x)):
        out.append(Violation("NonFiniteCovariate", data.unit_ids[i], data.period_ids[t], int(k)))
    if not out:
        du, dt = degenerate_units(y), degenerate_periods(y)
        if du.size or dt.size:
            warnings.warn(
                f"outcome never varies for units {[data.unit_ids[i] for i in du]} "
                f"and periods {[data.period_ids[t] for t in dt]}",
                DegenerateVariationWarning,
                stacklevel=2,
            )
    return out
