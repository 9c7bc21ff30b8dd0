"""Two-phase observed-data containers."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterator, Sequence

import numpy as np

from .exceptions import InputError
from .numerics import WHOLE_LINE, Interval, in_support


@dataclass(frozen=True)
class ObservationRecord:
    """One Phase-1 subject.  ``z`` is ``None`` unless the subject is in Phase 2."""

    y: float
    x: tuple
    r: int
    s: int
    z: tuple | None = None

    def __post_init__(self):
        if self.r not in (0, 1) or self.s not in (0, 1):
            raise InputError("r and s must be 0 or 1")
        if self.r == 1 and self.s != 1:
            raise InputError("a Phase-2 subject must have s = 1")
        if self.r == 1 and (self.z is None or not np.all(np.isfinite(self.z))):
            raise InputError("a Phase-2 subject must have z")


def _as_2d(a, n, name):
    a = np.asarray(a, dtype=float)
    if a.ndim == 0:
        a = np.full((n, 1), float(a))
    elif a.ndim == 1:
        a = a.reshape(n, 1) if a.size == n else a.reshape(1, -1).repeat(n, axis=0)
    if a.shape[0] != n:
        raise InputError(f"{name} has {a.shape[0]} rows, expected {n}")
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """Column-oriented Phase-1 data with Phase-2 indicators.

    ``z`` holds NaN wherever ``r == 0``.  ``s`` is ``I(y in D)`` for the
    support ``D`` supplied at construction.
    """

    y: np.ndarray
    x: np.ndarray
    z: np.ndarray
    r: np.ndarray
    s: np.ndarray
    y_name: str = "y"
    x_names: tuple = ()
    z_names: tuple = ()
    support: tuple = field(default=WHOLE_LINE)

    @classmethod
    def from_arrays(
        cls,
        y,
        x,
        z=None,
        r=None,
        support: Sequence[Interval] | None = WHOLE_LINE,
        y_name: str = "y",
        x_names: Sequence[str] | None = None,
        z_names: Sequence[str] | None = None,
        mask_z: bool = True,
    ) -> "Dataset":
        support = WHOLE_LINE if support is None else tuple(support)
        y = np.asarray(y, dtype=float).reshape(-1)
        n = y.size
        x = _as_2d(x, n, "x")
        z = np.full((n, 0), np.nan) if z is None else _as_2d(z, n, "z").copy()
        r = np.ones(n, dtype=np.int8) if r is None else np.asarray(r).astype(np.int8).reshape(-1)
        if r.size != n or not np.all((r == 0) | (r == 1)):
            raise InputError("r must be a 0/1 vector with one entry per row")
        s = in_support(y, support).astype(np.int8)
        bad = np.flatnonzero((r == 1) & (s == 0))
        if bad.size:
            raise InputError(f"row {bad[0]} has r = 1 but y outside the support")
        if mask_z and z.shape[1]:
            z[r == 0] = np.nan
        if z.shape[1]:
            missing = np.flatnonzero((r == 1) & ~np.all(np.isfinite(z), axis=1))
            if missing.size:
                raise InputError(f"row {missing[0]} has r = 1 but z is missing")
        if not np.all(np.isfinite(y)) or not np.all(np.isfinite(x)):
            raise InputError("y and x must be finite")
        x_names = tuple(x_names) if x_names else tuple(f"x{j}" for j in range(x.shape[1]))
        z_names = tuple(z_names) if z_names else tuple(f"z{j}" for j in range(z.shape[1]))
        return cls(y, x, z, r, s, y_name, x_names, z_names, tuple(support))

    @property
    def n(self) -> int:
        return self.y.size

    @property
    def m(self) -> int:
        return int(self.r.sum())

    @property
    def phase2(self) -> np.ndarray:
        return np.flatnonzero(self.r == 1)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return replace(self, y=self.y[idx], x=self.x[idx], z=self.z[idx], r=self.r[idx], s=self.s[idx])

    def with_support(self, support: Sequence[Interval]) -> "Dataset":
        return Dataset.from_arrays(
            self.y, self.x, self.z, self.r, support, self.y_name, self.x_names, self.z_names, mask_z=False
        )

    def with_r(self, r) -> "Dataset":
        """Copy with new Phase-2 indicators; z is masked where ``r == 0``."""
        return Dataset.from_arrays(
            self.y, self.x, self.z, r, self.support, self.y_name, self.x_names, self.z_names, mask_z=True
        )

    def records(self) -> Iterator[ObservationRecord]:
        for i in range(self.n):
            z = tuple(self.z[i]) if self.r[i] == 1 else None
            yield ObservationRecord(float(self.y[i]), tuple(self.x[i]), int(self.r[i]), int(self.s[i]), z)
