"""Uniform space-time lattices on [0, T] x [0, 1] and the fields that live on them.

Only interior spatial nodes are stored. The Dirichlet boundary values are zero
by convention and never materialized.
"""
from __future__ import annotations

from typing import Any, Callable, Dict, Union

import numpy as np
import pydantic

import spdelab.logging
from spdelab.errors import GridMismatchError, InvalidArgumentError
from spdelab.types import SUP, FrozenModel

__all__ = (
    "SpaceTimeGrid",
    "Profile",
    "Field",
    "make_grid",
    "lp_norm",
    "sup_time_norm",
    "h_norms",
    "require_same_grid",
)

NormOrder = Union[float, int, str]


class SpaceTimeGrid(FrozenModel):
    """A uniform lattice with `nx` interior nodes and `nt` time steps."""

    nx: pydantic.PositiveInt
    nt: pydantic.PositiveInt
    horizon_T: pydantic.PositiveFloat

    @property
    def dx(self) -> float:
        return 1.0 / (self.nx + 1)

    @property
    def dt(self) -> float:
        return self.horizon_T / self.nt

    @property
    def stable(self) -> bool:
        """True when dt <= dx²/2, the stability limit of a fully explicit Laplacian."""
        return self.dt <= 0.5 * self.dx ** 2

    @property
    def x(self) -> np.ndarray:
        """Interior node coordinates."""
        return np.arange(1, self.nx + 1) * self.dx

    @property
    def t(self) -> np.ndarray:
        """Time levels 0, dt, ..., T."""
        return np.arange(self.nt + 1) * self.dt

    @property
    def cell_times(self) -> np.ndarray:
        """Midpoints of the time cells [t_m, t_m+1]."""
        return (np.arange(self.nt) + 0.5) * self.dt

    def __str__(self) -> str:
        return f"grid(nx={self.nx}, nt={self.nt}, T={self.horizon_T:g})"


def make_grid(nx: int, nt: int, horizon_T: float) -> SpaceTimeGrid:
    """Build a grid, rejecting empty or negative dimensions.

    Grids that violate the explicit stability limit are legal (the Laplacian is
    treated implicitly by default) but are reported with a warning.
    """
    if nx < 1 or nt < 1:
        raise InvalidArgumentError(f"grid dimensions must be positive (nx={nx}, nt={nt})")
    if not horizon_T > 0:
        raise InvalidArgumentError(f"horizon_T must be positive (got {horizon_T})")

    grid = SpaceTimeGrid(nx=nx, nt=nt, horizon_T=horizon_T)
    if not grid.stable:
        spdelab.logging.logger.warning(
            f"{grid} exceeds the explicit stability limit dt <= dx²/2 ({grid.dt:.3e} > {0.5 * grid.dx ** 2:.3e})"
        )
    return grid


def require_same_grid(*operands: Any) -> SpaceTimeGrid:
    """Return the common grid of the operands or raise `GridMismatchError`."""
    grids = [operand if isinstance(operand, SpaceTimeGrid) else operand.grid for operand in operands]
    first = grids[0]
    for other in grids[1:]:
        if other != first:
            raise GridMismatchError(f"operands are bound to different grids: {first} != {other}")
    return first


def _frozen_array(value: Any, shape: tuple, name: str) -> np.ndarray:
    array = np.array(value, dtype=float)
    if array.shape != shape:
        raise ValueError(f"{name} must have shape {shape} (got {array.shape})")
    array.setflags(write=False)
    return array


class Profile(FrozenModel):
    """A function on the interior nodes of a grid: an element of H = L²(0, 1)."""

    grid: SpaceTimeGrid
    values: np.ndarray

    @pydantic.validator("values", pre=True)
    @classmethod
    def _validate_values(cls, v: Any, values: Dict[str, Any]) -> np.ndarray:
        if "grid" not in values:
            raise ValueError("a valid grid is required")
        return _frozen_array(v, (values["grid"].nx,), "profile values")

    @classmethod
    def zeros(cls, grid: SpaceTimeGrid) -> "Profile":
        return cls(grid=grid, values=np.zeros(grid.nx))

    @classmethod
    def from_function(cls, grid: SpaceTimeGrid, fn: Callable[[np.ndarray], Any]) -> "Profile":
        """Sample `fn(x)` on the interior nodes."""
        return cls(grid=grid, values=np.broadcast_to(fn(grid.x), (grid.nx,)))

    def __eq__(self, other: Any) -> bool:
        if not isinstance(other, Profile):
            return NotImplemented
        return self.grid == other.grid and np.array_equal(self.values, other.values)

    def __add__(self, other: "Profile") -> "Profile":
        require_same_grid(self, other)
        return Profile(grid=self.grid, values=self.values + other.values)

    def __sub__(self, other: "Profile") -> "Profile":
        require_same_grid(self, other)
        return Profile(grid=self.grid, values=self.values - other.values)

    def __mul__(self, scalar: float) -> "Profile":
        return Profile(grid=self.grid, values=scalar * self.values)

    __rmul__ = __mul__

    def inner(self, other: "Profile") -> float:
        """The lattice H inner product with dx weights."""
        require_same_grid(self, other)
        return float(self.grid.dx * np.dot(self.values, other.values))


class Field(FrozenModel):
    """A sequence of nt+1 profiles indexed by time level; level 0 is the initial condition."""

    grid: SpaceTimeGrid
    values: np.ndarray

    @pydantic.validator("values", pre=True)
    @classmethod
    def _validate_values(cls, v: Any, values: Dict[str, Any]) -> np.ndarray:
        if "grid" not in values:
            raise ValueError("a valid grid is required")
        grid = values["grid"]
        return _frozen_array(v, (grid.nt + 1, grid.nx), "field values")

    @classmethod
    def zeros(cls, grid: SpaceTimeGrid) -> "Field":
        return cls(grid=grid, values=np.zeros((grid.nt + 1, grid.nx)))

    @classmethod
    def from_function(cls, grid: SpaceTimeGrid, fn: Callable[[np.ndarray, np.ndarray], Any]) -> "Field":
        """Sample `fn(t, x)` on every time level and interior node."""
        t, x = np.meshgrid(grid.t, grid.x, indexing="ij")
        return cls(grid=grid, values=np.broadcast_to(fn(t, x), t.shape))

    def profile(self, n: int) -> Profile:
        return Profile(grid=self.grid, values=self.values[n])

    @property
    def initial(self) -> Profile:
        return self.profile(0)

    @property
    def terminal(self) -> Profile:
        return self.profile(self.grid.nt)

    def __len__(self) -> int:
        return self.values.shape[0]

    def __eq__(self, other: Any) -> bool:
        if not isinstance(other, Field):
            return NotImplemented
        return self.grid == other.grid and np.array_equal(self.values, other.values)

    def __add__(self, other: "Field") -> "Field":
        require_same_grid(self, other)
        return Field(grid=self.grid, values=self.values + other.values)

    def __sub__(self, other: "Field") -> "Field":
        require_same_grid(self, other)
        return Field(grid=self.grid, values=self.values - other.values)

    def __mul__(self, scalar: float) -> "Field":
        return Field(grid=self.grid, values=scalar * self.values)

    __rmul__ = __mul__


def _check_order(p: NormOrder) -> NormOrder:
    if isinstance(p, str):
        if p != SUP:
            raise InvalidArgumentError(f"unknown norm order {p!r}: expected a real p >= 1 or {SUP!r}")
        return p
    if not p >= 1:
        raise InvalidArgumentError(f"norm order must satisfy p >= 1 (got {p})")
    return float(p)


def _lp(p: NormOrder, values: np.ndarray, dx: float, axis: int) -> Any:
    magnitude = np.abs(values)
    if p == SUP or p == np.inf:
        return magnitude.max(axis=axis)
    if p == 2:
        return np.sqrt(dx * np.sum(magnitude * magnitude, axis=axis))
    return (dx * np.sum(magnitude ** p, axis=axis)) ** (1.0 / p)


def lp_norm(p: NormOrder, profile: Profile) -> float:
    """(∫|u|^p dx)^{1/p} by midpoint quadrature; `"sup"` gives the max over nodes."""
    order = _check_order(p)
    return float(_lp(order, profile.values, profile.grid.dx, axis=0))


def sup_time_norm(p: NormOrder, field: Field) -> float:
    """The maximum over time levels of `lp_norm(p, ·)`."""
    order = _check_order(p)
    if len(field) == 0:
        raise InvalidArgumentError("sup_time_norm of an empty field")
    return float(np.max(_lp(order, field.values, field.grid.dx, axis=1)))


def h_norms(values: np.ndarray, dx: float, axis: int = 0) -> np.ndarray:
    """H-norms of a stack of profiles whose node axis is `axis`."""
    return np.sqrt(dx * np.sum(values * values, axis=axis))
