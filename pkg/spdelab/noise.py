"""Brownian-sheet increments, deterministic controls and the Girsanov shift.

Increments come from a counter-based generator (`numpy.random.Philox`) keyed
by `(seed, replica)`. Each cell consumes exactly one 64-bit word in (time,
space) order, so a replica's lattice does not depend on which worker draws
it or in which order replicas are drawn.
"""
from __future__ import annotations

import math
from typing import Any, Callable, Dict, Iterator, Optional, Sequence, Tuple, Union

import numpy as np
import pydantic
import scipy.special

from spdelab.errors import InvalidArgumentError
from spdelab.lattice import SpaceTimeGrid, require_same_grid
from spdelab.types import FrozenModel

__all__ = (
    "StreamKey",
    "NoiseLattice",
    "NoiseStream",
    "Control",
    "control_objective",
    "sample_sheet",
    "shift_noise",
)

_UNIT = 2.0 ** -53


class StreamKey(FrozenModel):
    seed: pydantic.conint(ge=0, lt=2 ** 64)
    replica: pydantic.conint(ge=0, lt=2 ** 64) = 0

    def bit_generator(self) -> np.random.Philox:
        return np.random.Philox(key=np.array([self.seed, self.replica], dtype=np.uint64))

    def __str__(self) -> str:
        return f"{self.seed}/{self.replica}"


StreamKeyLike = Union[StreamKey, Tuple[int, int]]


def _as_key(stream_key: StreamKeyLike) -> StreamKey:
    if isinstance(stream_key, StreamKey):
        return stream_key
    seed, replica = stream_key
    return StreamKey(seed=seed, replica=replica)


def _standard_normals(bit_generator: np.random.Philox, count: int) -> np.ndarray:
    """One standard normal per raw word by inverse-CDF, so draws map one-to-one to counters."""
    words = bit_generator.random_raw(count)
    uniforms = ((words >> np.uint64(11)).astype(float) + 0.5) * _UNIT
    return scipy.special.ndtri(uniforms)


def _frozen(values: Any, shape: Tuple[int, ...], name: str) -> np.ndarray:
    array = np.array(values, dtype=float)
    if array.shape != shape:
        raise ValueError(f"{name} must have shape {shape} (got {array.shape})")
    array.setflags(write=False)
    return array


class NoiseLattice(FrozenModel):
    """Brownian-sheet increments ΔW over the nt x nx cells of a grid."""

    grid: SpaceTimeGrid
    increments: np.ndarray
    stream_key: Optional[StreamKey] = None

    @pydantic.validator("increments", pre=True)
    @classmethod
    def _validate_increments(cls, v: Any, values: Dict[str, Any]) -> np.ndarray:
        if "grid" not in values:
            raise ValueError("a valid grid is required")
        grid = values["grid"]
        return _frozen(v, (grid.nt, grid.nx), "increments")

    @classmethod
    def zeros(cls, grid: SpaceTimeGrid) -> "NoiseLattice":
        return cls(grid=grid, increments=np.zeros((grid.nt, grid.nx)))

    @property
    def cell_variance(self) -> float:
        return self.grid.dt * self.grid.dx

    def __eq__(self, other: Any) -> bool:
        if not isinstance(other, NoiseLattice):
            return NotImplemented
        return self.grid == other.grid and np.array_equal(self.increments, other.increments)


def sample_sheet(grid: SpaceTimeGrid, stream_key: StreamKeyLike) -> NoiseLattice:
    """Draw the increments of one replica: N(0, dt·dx) per cell."""
    key = _as_key(stream_key)
    normals = _standard_normals(key.bit_generator(), grid.nt * grid.nx).reshape(grid.nt, grid.nx)
    return NoiseLattice(grid=grid, increments=math.sqrt(grid.dt * grid.dx) * normals, stream_key=key)


class NoiseStream:
    """Time-ordered increment rows for a block of replicas.

    Iterating yields one `(nx, len(replicas))` array per time step. Rows are
    drawn `chunk` steps at a time and match `sample_sheet` bit for bit; each
    iteration restarts the generators, so a stream can be replayed.
    """

    def __init__(self, grid: SpaceTimeGrid, seed: int, replicas: Sequence[int], *, chunk: int = 64) -> None:
        if not replicas:
            raise InvalidArgumentError("a noise stream needs at least one replica")
        if chunk < 1:
            raise InvalidArgumentError(f"chunk must be positive (got {chunk})")
        self.grid = grid
        self.keys = [StreamKey(seed=seed, replica=replica) for replica in replicas]
        self.chunk = chunk

    def __len__(self) -> int:
        return self.grid.nt

    @property
    def width(self) -> int:
        return len(self.keys)

    def __iter__(self) -> Iterator[np.ndarray]:
        nt, nx = self.grid.nt, self.grid.nx
        scale = math.sqrt(self.grid.dt * self.grid.dx)
        generators = [key.bit_generator() for key in self.keys]
        for start in range(0, nt, self.chunk):
            rows = min(self.chunk, nt - start)
            block = np.stack(
                [_standard_normals(generator, rows * nx).reshape(rows, nx) for generator in generators],
                axis=-1,
            )
            block *= scale
            yield from block


class Control(FrozenModel):
    """A deterministic control h sampled at cell centres, constant on each cell."""

    grid: SpaceTimeGrid
    values: np.ndarray
    bound_M: Optional[pydantic.PositiveFloat] = None

    @pydantic.validator("values", pre=True)
    @classmethod
    def _validate_values(cls, v: Any, values: Dict[str, Any]) -> np.ndarray:
        if "grid" not in values:
            raise ValueError("a valid grid is required")
        grid = values["grid"]
        return _frozen(v, (grid.nt, grid.nx), "control values")

    @pydantic.validator("bound_M")
    @classmethod
    def _validate_membership(cls, v: Optional[float], values: Dict[str, Any]) -> Optional[float]:
        if v is not None and "values" in values and "grid" in values:
            grid = values["grid"]
            norm_squared = float(grid.dt * grid.dx * np.sum(values["values"] ** 2))
            if norm_squared > v:
                raise ValueError(f"control lies outside T_M: ∫∫h² = {norm_squared:g} > M = {v:g}")
        return v

    @classmethod
    def zeros(cls, grid: SpaceTimeGrid, bound_M: Optional[float] = None) -> "Control":
        return cls(grid=grid, values=np.zeros((grid.nt, grid.nx)), bound_M=bound_M)

    @classmethod
    def from_function(
        cls, grid: SpaceTimeGrid, fn: Callable[[np.ndarray, np.ndarray], Any], bound_M: Optional[float] = None
    ) -> "Control":
        """Sample `fn(s, y)` at the cell centres `(t_m + dt/2, x_i)`."""
        s, y = np.meshgrid(grid.cell_times, grid.x, indexing="ij")
        return cls(grid=grid, values=np.broadcast_to(fn(s, y), s.shape), bound_M=bound_M)

    @property
    def norm_squared(self) -> float:
        """∫∫h² with cell measure dt·dx."""
        return float(self.grid.dt * self.grid.dx * np.sum(self.values * self.values))

    @property
    def energy(self) -> float:
        return 0.5 * self.norm_squared

    def in_ball(self, M: float) -> bool:
        """Membership in T_M = {h : ∫∫h² ≤ M}."""
        return self.norm_squared <= M

    def scaled_to_energy(self, norm_squared: float) -> "Control":
        """Rescale so that ∫∫h² equals `norm_squared`."""
        current = self.norm_squared
        if current == 0.0:
            raise InvalidArgumentError("cannot rescale the zero control")
        return Control(grid=self.grid, values=math.sqrt(norm_squared / current) * self.values)

    def inner(self, other: "Control") -> float:
        """The L²([0,T]×[0,1]) inner product with cell measure dt·dx."""
        require_same_grid(self, other)
        return float(self.grid.dt * self.grid.dx * np.sum(self.values * other.values))

    def __eq__(self, other: Any) -> bool:
        if not isinstance(other, Control):
            return NotImplemented
        return self.grid == other.grid and np.array_equal(self.values, other.values)

    def __add__(self, other: "Control") -> "Control":
        require_same_grid(self, other)
        return Control(grid=self.grid, values=self.values + other.values)

    def __sub__(self, other: "Control") -> "Control":
        require_same_grid(self, other)
        return Control(grid=self.grid, values=self.values - other.values)

    def __mul__(self, scalar: float) -> "Control":
        return Control(grid=self.grid, values=scalar * self.values)

    __rmul__ = __mul__


def shift_noise(noise: NoiseLattice, h: Control, lambda_: float) -> NoiseLattice:
    """The increments of W + λ∫∫h: each cell gains λ·h·dt·dx."""
    if lambda_ < 0:
        raise InvalidArgumentError(f"lambda must be nonnegative (got {lambda_})")
    grid = require_same_grid(noise, h)
    if lambda_ == 0.0:
        return noise
    return NoiseLattice(grid=grid, increments=noise.increments + lambda_ * grid.dt * grid.dx * h.values)


def control_objective(h: Control) -> float:
    """½∫∫h² by cell quadrature."""
    return h.energy
