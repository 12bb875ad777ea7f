"""Actuator influence fields and differentiable placement/width handling.

Each actuator i turns its scalar command u_i into a spatial field through
a Gaussian-like bump m_i centered on the actuator location:

    m_i(node) = exp(-|node - p_i|^2 / (2 sigma_i^2)),   peak value 1.

Placements are co-designed with the policy. Because the system only
feels actuation at grid nodes, the applied placement is always snapped
to the nearest node, while a continuous virtual placement accumulates
gradient updates across iterations. Gradients with respect to placement
are taken through the Gaussian closed form evaluated at the snapped
position — never through the rounding map, which is non-differentiable
and would otherwise swallow sub-spacing updates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import ACTUATORS, stream

# Tie tolerance for round-half-up, in units of grid spacing.
_TIE_EPS = 1e-12


@dataclass
class ActuatorDesign:
    """Placement and width variables for N actuators.

    virtual: continuous positions, the variables that accumulate
        gradient steps; (N, dim).
    snapped: on-grid positions actually applied to the system; (N, dim).
    widths: Gaussian bump widths sigma, one per actuator; (N,).
    """

    virtual: np.ndarray
    snapped: np.ndarray
    widths: np.ndarray

    def __post_init__(self):
        self.virtual = np.atleast_2d(np.asarray(self.virtual, dtype=np.float64))
        self.snapped = np.atleast_2d(np.asarray(self.snapped, dtype=np.float64))
        self.widths = np.asarray(self.widths, dtype=np.float64)
        if self.snapped.shape != self.virtual.shape:
            raise ValueError("virtual and snapped placements must have equal shape")
        if self.widths.shape != (self.virtual.shape[0],):
            raise ValueError("one width per actuator required")
        if np.any(self.widths <= 0):
            raise ValueError("widths must be positive")

    @property
    def count(self) -> int:
        return self.virtual.shape[0]


@dataclass
class InfluenceMatrix:
    """One influence field per actuator, evaluated at every node; (N, n_nodes)."""

    grid: object
    rows: np.ndarray

    def apply(self, outputs: np.ndarray) -> np.ndarray:
        """Field generated by per-actuator commands: sum_i u_i m_i."""
        outputs = np.asarray(outputs, dtype=np.float64)
        if outputs.shape != (self.rows.shape[0],):
            raise ValueError(
                f"expected {self.rows.shape[0]} actuator commands, got {outputs.shape}"
            )
        return outputs @ self.rows

    def gram(self, quad_weights: np.ndarray) -> np.ndarray:
        """Pairwise spatial inner products <m_i, m_j>; (N, N)."""
        return (self.rows * quad_weights) @ self.rows.T


def snap_to_grid(grid, positions: np.ndarray) -> np.ndarray:
    """Clamp to the domain, then round to the nearest node per axis.

    Ties round half up (toward the larger node index). Idempotent, and
    |snapped - clamped| <= spacing/2 per axis.
    """
    positions = np.atleast_2d(np.asarray(positions, dtype=np.float64))
    spacing = np.asarray(grid.spacing)
    extents = np.asarray(grid.extents)
    clamped = np.clip(positions, 0.0, extents)
    idx = np.floor(clamped / spacing + 0.5 + _TIE_EPS)
    return idx * spacing


def init_actuators(grid, count: int, init_ranges, width0: float, seed: int) -> ActuatorDesign:
    """Place actuators uniformly at random inside per-axis ranges and snap."""
    gen = stream(seed, ACTUATORS)
    ranges = np.asarray(init_ranges, dtype=np.float64).reshape(grid.dim, 2)
    virtual = gen.uniform(ranges[:, 0], ranges[:, 1], size=(count, grid.dim))
    return ActuatorDesign(
        virtual=virtual,
        snapped=snap_to_grid(grid, virtual),
        widths=np.full(count, float(width0)),
    )


def influence(design: ActuatorDesign, grid) -> InfluenceMatrix:
    """Gaussian bump per actuator, peak 1 at its snapped node."""
    coords = grid.node_coords  # (n, dim)
    diff = coords[None, :, :] - design.snapped[:, None, :]  # (N, n, dim)
    sq = np.sum(diff**2, axis=2)
    rows = np.exp(-sq / (2.0 * design.widths[:, None] ** 2))
    return InfluenceMatrix(grid, rows)


def placement_gradient(
    upstream: np.ndarray, design: ActuatorDesign, grid
) -> np.ndarray:
    """Chain upstream dL/dm_i(node) through dm_i/dp_i; returns (N, dim).

    dm_i(x)/dp_i = m_i(x) (x - p_i) / sigma_i^2, evaluated at the snapped
    positions where the influence was actually built.
    """
    upstream = np.asarray(upstream, dtype=np.float64)
    coords = grid.node_coords
    diff = coords[None, :, :] - design.snapped[:, None, :]
    rows = influence(design, grid).rows
    dm_dp = rows[:, :, None] * diff / design.widths[:, None, None] ** 2
    return np.einsum("an,and->ad", upstream, dm_dp)


def width_gradient(upstream: np.ndarray, design: ActuatorDesign, grid) -> np.ndarray:
    """Chain upstream dL/dm_i(node) through dm_i/dsigma_i; returns (N,).

    dm_i(x)/dsigma_i = m_i(x) |x - p_i|^2 / sigma_i^3.
    """
    upstream = np.asarray(upstream, dtype=np.float64)
    coords = grid.node_coords
    diff = coords[None, :, :] - design.snapped[:, None, :]
    sq = np.sum(diff**2, axis=2)
    rows = influence(design, grid).rows
    dm_ds = rows * sq / design.widths[:, None] ** 3
    return np.einsum("an,an->a", upstream, dm_ds)
