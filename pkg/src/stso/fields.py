"""Spatial grids, discrete fields, and spatially-white noise increments.

The state of every simulated system lives on a uniform grid over a box
domain. Spatial inner products are evaluated with the trapezoid rule
(interior nodes weighted by the cell volume, boundary nodes by half per
axis), which is second-order accurate and consistent with the
central-difference stencils used by the solvers.

Spatially-white (identity-covariance) noise is discretized on the same
grid: each node receives an independent N(0, dt / cell_volume) draw per
step. This is the standard finite-difference truncation — with the
one-hot node basis e_j, the orthonormalized basis is e_j / sqrt(V), so
the nodal increments of the noise process carry a 1/V variance factor.
Doubling the resolution therefore doubles the per-node variance.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np


@dataclass(frozen=True)
class Grid:
    """Uniform grid on [0, extent] (1D) or [0, w] x [0, h] (2D).

    Nodes are spaced extent/(J-1) apart so node i sits at i * spacing.
    2D fields are stored flat in C order: node (ix, iy) -> ix * J + iy.
    """

    dim: int
    extents: tuple[float, ...]
    points_per_axis: int

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise ValueError(f"dim must be 1 or 2, got {self.dim}")
        if len(self.extents) != self.dim:
            raise ValueError("one extent per axis required")
        if any(e <= 0 for e in self.extents):
            raise ValueError(f"extents must be positive, got {self.extents}")
        if self.points_per_axis < 3:
            raise ValueError(
                f"need at least 3 points per axis (an interior node), got {self.points_per_axis}"
            )

    @property
    def spacing(self) -> tuple[float, ...]:
        j = self.points_per_axis
        return tuple(e / (j - 1) for e in self.extents)

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def n_nodes(self) -> int:
        return self.points_per_axis**self.dim

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.points_per_axis,) * self.dim

    def axis_coords(self, axis: int = 0) -> np.ndarray:
        return np.arange(self.points_per_axis) * self.spacing[axis]

    @cached_property
    def node_coords(self) -> np.ndarray:
        """(n_nodes, dim) coordinates in flat node order."""
        if self.dim == 1:
            return self.axis_coords(0)[:, None]
        x, y = np.meshgrid(self.axis_coords(0), self.axis_coords(1), indexing="ij")
        return np.column_stack([x.ravel(), y.ravel()])

    @cached_property
    def quadrature_weights(self) -> np.ndarray:
        """Per-node trapezoid weights; sums to the domain volume."""
        w = [np.full(self.points_per_axis, s) for s in self.spacing]
        for wa in w:
            wa[0] *= 0.5
            wa[-1] *= 0.5
        if self.dim == 1:
            return w[0]
        return np.outer(w[0], w[1]).ravel()


def make_grid(dim: int, extents, points_per_axis: int) -> Grid:
    if np.isscalar(extents):
        extents = (float(extents),) * dim
    else:
        extents = tuple(float(e) for e in extents)
    return Grid(dim=dim, extents=extents, points_per_axis=int(points_per_axis))


@dataclass
class Field:
    """Scalar values, one per grid node."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.grid.n_nodes,):
            raise ValueError(
                f"field has {self.values.shape} values, grid has {self.grid.n_nodes} nodes"
            )

    def check_finite(self):
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field contains non-finite values")


@dataclass
class StateVector:
    """Ordered stack of fields on one shared grid.

    Second-order systems carry (position, velocity) pairs: 2 components
    for a beam, 4 for the planar soft limb (d_x, d_y, v_x, v_y).
    """

    components: list[Field]

    def __post_init__(self):
        if not self.components:
            raise ValueError("state vector needs at least one component")
        g = self.components[0].grid
        if any(c.grid is not g and c.grid != g for c in self.components[1:]):
            raise ValueError("all components must share one grid")

    @property
    def grid(self) -> Grid:
        return self.components[0].grid

    def as_array(self) -> np.ndarray:
        """(n_components, n_nodes) array view of the stacked state."""
        return np.stack([c.values for c in self.components])

    @classmethod
    def from_array(cls, grid: Grid, arr: np.ndarray) -> "StateVector":
        return cls([Field(grid, row) for row in np.atleast_2d(arr)])


@dataclass
class NoiseIncrement:
    """Per-channel nodal Gaussian increments for one time step."""

    grid: Grid
    values: np.ndarray  # (channels, n_nodes)

    def __post_init__(self):
        self.values = np.atleast_2d(np.asarray(self.values, dtype=np.float64))
        if self.values.shape[1] != self.grid.n_nodes:
            raise ValueError("noise increment does not match grid node count")


def inner_product(f: Field, g: Field) -> float:
    """Discrete L2 inner product <f, g> by trapezoid quadrature."""
    if f.grid != g.grid:
        raise ValueError("inner product requires fields on the same grid")
    return float(np.dot(f.values * g.values, f.grid.quadrature_weights))


def one_hot_basis(grid: Grid, node_index: int) -> Field:
    if not 0 <= node_index < grid.n_nodes:
        raise IndexError(f"node index {node_index} out of range for {grid.n_nodes} nodes")
    v = np.zeros(grid.n_nodes)
    v[node_index] = 1.0
    return Field(grid, v)


def sample_cylindrical_increment(
    grid, dt: float, rng: np.random.Generator, channels: int = 1
) -> NoiseIncrement:
    """One step of identity-covariance spatio-temporal noise.

    Each node of each channel gets an independent N(0, dt/cell_volume)
    draw; Dirichlet systems overwrite pinned nodes afterwards.
    """
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    scale = np.sqrt(dt / grid.cell_volume)
    return NoiseIncrement(grid, rng.standard_normal((channels, grid.n_nodes)) * scale)


def sample_noise_block(
    grid, dt: float, rng: np.random.Generator, steps: int, channels: int = 1
) -> np.ndarray:
    """(steps, channels, n_nodes) of increments in a single vectorized draw.

    Draw order equals time order, so a whole rollout's noise comes from
    one stream without per-step generator setup.
    """
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    scale = np.sqrt(dt / grid.cell_volume)
    return rng.standard_normal((steps, channels, grid.n_nodes)) * scale
