"""Planar continuum limb lumped onto a particle lattice.

The limb is an elastic sheet clamped at its root column. Particles carry
displacements from a straight rest configuration parameterized by arc
length, so stretch vectors of the rest state have unit norm and the rest
configuration is an exact equilibrium.

Strains are staggered: tensile (Green) strains live on the members
between adjacent particles,

    e_m = |t_m|^2 - lam_m^2,   t_m = (s_b - s_a) / l,

and shear strains live on cell centers from member-averaged stretch
vectors, e_xy = <t_x, t_y> / 2. Staggering matters — evaluating strains
at particles with centered differences decouples even and odd particles
and leaves zigzag deformations force-free, which spatially-white noise
then excites without bound. Stresses contract the strains with the
tensile constant on the diagonal and the shear modulus off-diagonal,
plus a strain-rate (Kelvin-Voigt) term scaled by the retardation time.
Nodal forces are the exact negative gradients of the stored energy, so
the elastic part is conservative and momentum-free by construction.

Actuation follows the muscular-hydrostat pattern: a positive command at
a particle shortens the rest lengths of its adjacent horizontal members
and lengthens the vertical ones by the same amount, approximately
conserving volume. Integration is explicit Euler; forces, gravity, and
noise all divide by the material density on the velocity channels.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .systems import DivergedRolloutError, SystemConfig

# Rest stretches stay inside this band no matter how large the commands
# get, keeping the actuation model bounded.
_STRETCH_MIN, _STRETCH_MAX = 0.2, 1.8


@dataclass(frozen=True)
class ParticleLattice:
    """Rectangular particle grid with arc-length material coordinates."""

    points: tuple[int, int]
    spacing_value: float

    def __post_init__(self):
        if min(self.points) < 2:
            raise ValueError("lattice needs at least 2 particles per axis")
        if self.spacing_value <= 0:
            raise ValueError("particle spacing must be positive")

    dim = 2

    @property
    def spacing(self) -> tuple[float, float]:
        return (self.spacing_value, self.spacing_value)

    @property
    def extents(self) -> tuple[float, float]:
        return tuple((p - 1) * self.spacing_value for p in self.points)

    @property
    def n_nodes(self) -> int:
        return self.points[0] * self.points[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.points

    @cached_property
    def node_coords(self) -> np.ndarray:
        px, py = self.points
        x, y = np.meshgrid(
            np.arange(px) * self.spacing_value,
            np.arange(py) * self.spacing_value,
            indexing="ij",
        )
        return np.column_stack([x.ravel(), y.ravel()])

    @property
    def cell_volume(self) -> float:
        return self.spacing_value**2

    @cached_property
    def quadrature_weights(self) -> np.ndarray:
        px, py = self.points
        wx = np.full(px, self.spacing_value)
        wy = np.full(py, self.spacing_value)
        wx[0] *= 0.5
        wx[-1] *= 0.5
        wy[0] *= 0.5
        wy[-1] *= 0.5
        return np.outer(wx, wy).ravel()


class SoftLimb2D:
    """Clamped elastic sheet with rest-length (muscular) actuation.

    State channels: (d_x, d_y, v_x, v_y); noise and forces act on the
    velocity pair.
    """

    state_channels = 4
    noise_channels = 2
    control_channel_multiplicity = 2

    def __init__(self, cfg: SystemConfig):
        self.cfg = cfg
        self.grid = ParticleLattice(tuple(cfg.particles), cfg.particle_spacing)
        self.noise_scale = 1.0 / np.sqrt(cfg.rho)
        px, py = self.grid.points
        self.rest = self.grid.node_coords.T.reshape(2, px, py)

    @property
    def n_steps(self) -> int:
        return self.cfg.n_steps

    def initial_state(self) -> np.ndarray:
        return np.zeros((4, self.grid.n_nodes))

    def forces(self, d: np.ndarray, v: np.ndarray, modulation: np.ndarray) -> np.ndarray:
        """Force density from member stresses, cell shear, and gravity.

        d, v: (B, 2, n) displacement and velocity; modulation: (B, n)
        actuation field before the rest-stretch gain. Returns (B, 2, n).
        """
        cfg = self.cfg
        px, py = self.grid.points
        h = self.grid.spacing_value
        b = d.shape[0]
        s = self.rest[None] + d.reshape(b, 2, px, py)
        vel = v.reshape(b, 2, px, py)
        cm = modulation.reshape(b, px, py)

        # member stretch vectors and their rates
        tx = (s[:, :, 1:, :] - s[:, :, :-1, :]) / h    # (B, 2, px-1, py)
        ty = (s[:, :, :, 1:] - s[:, :, :, :-1]) / h    # (B, 2, px, py-1)
        wx = (vel[:, :, 1:, :] - vel[:, :, :-1, :]) / h
        wy = (vel[:, :, :, 1:] - vel[:, :, :, :-1]) / h

        # rest stretches modulated by the mean command at the member ends
        cmx = 0.5 * (cm[:, 1:, :] + cm[:, :-1, :])
        cmy = 0.5 * (cm[:, :, 1:] + cm[:, :, :-1])
        lam_x = np.clip(1.0 - cfg.actuation_gain * cmx, _STRETCH_MIN, _STRETCH_MAX)
        lam_y = np.clip(1.0 + cfg.actuation_gain * cmy, _STRETCH_MIN, _STRETCH_MAX)

        # tensile member stresses (elastic + strain rate)
        e_xx = np.sum(tx * tx, axis=1) - lam_x**2
        e_yy = np.sum(ty * ty, axis=1) - lam_y**2
        s11 = cfg.k_tensile * (e_xx + cfg.tau * 2.0 * np.sum(tx * wx, axis=1))
        s22 = cfg.k_tensile * (e_yy + cfg.tau * 2.0 * np.sum(ty * wy, axis=1))

        force = np.zeros((b, 2, px, py))
        fx = (s11[:, None] * tx) / h   # member force density on the +x end
        fy = (s22[:, None] * ty) / h
        force[:, :, 1:, :] -= fx
        force[:, :, :-1, :] += fx
        force[:, :, :, 1:] -= fy
        force[:, :, :, :-1] += fy

        # shear on cell centers from member-averaged stretches
        txc = 0.5 * (tx[:, :, :, 1:] + tx[:, :, :, :-1])   # (B, 2, px-1, py-1)
        tyc = 0.5 * (ty[:, :, 1:, :] + ty[:, :, :-1, :])
        wxc = 0.5 * (wx[:, :, :, 1:] + wx[:, :, :, :-1])
        wyc = 0.5 * (wy[:, :, 1:, :] + wy[:, :, :-1, :])
        e_xy = 0.5 * np.sum(txc * tyc, axis=1)
        r_xy = 0.5 * np.sum(wxc * tyc + txc * wyc, axis=1)
        s12 = cfg.mu_shear * (e_xy + cfg.tau * r_xy)

        g_sum = (0.5 / h) * s12[:, None] * (txc + tyc)
        g_dif = (0.5 / h) * s12[:, None] * (tyc - txc)
        force[:, :, :-1, :-1] += g_sum   # (i, j) corner of each cell
        force[:, :, 1:, 1:] -= g_sum     # (i+1, j+1)
        force[:, :, 1:, :-1] -= g_dif    # (i+1, j)
        force[:, :, :-1, 1:] += g_dif    # (i, j+1)

        force[:, 1] -= cfg.rho_m * cfg.gravity * cfg.gravity_scale
        return force.reshape(b, 2, px * py)

    def step_batch(self, states, controls, dw, m_rows) -> np.ndarray:
        cfg = self.cfg
        b = states.shape[0]
        modulation = (
            controls @ m_rows
            if m_rows is not None and m_rows.size
            else np.zeros((b, self.grid.n_nodes))
        )
        d, v = states[:, :2], states[:, 2:]
        force = self.forces(d, v, modulation)
        v_new = v + (cfg.dt * force + self.noise_scale * dw) / cfg.rho_m
        d_new = d + cfg.dt * v
        out = np.concatenate([d_new, v_new], axis=1)
        px, py = self.grid.points
        clamped = out.reshape(b, 4, px, py)
        clamped[:, :, 0, :] = 0.0
        return clamped.reshape(b, 4, px * py)

    def step(self, state, controls, dw, m_rows=None) -> np.ndarray:
        out = self.step_batch(
            np.asarray(state, dtype=np.float64)[None],
            np.asarray(controls, dtype=np.float64)[None],
            np.asarray(dw, dtype=np.float64)[None],
            m_rows,
        )[0]
        if not np.all(np.isfinite(out)):
            raise DivergedRolloutError("soft limb state left the finite range")
        return out
