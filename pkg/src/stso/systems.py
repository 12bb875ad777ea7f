"""Time steppers for the simulated stochastic PDE testbeds.

All grid PDEs use a semi-implicit central-difference scheme: the stiff
linear part (diffusion, or the full beam operator) is treated backward
in time and factored once per configuration, while nonlinear terms,
control, and noise enter explicitly. State updates solve

    (I - dt A) u+ = u + dt (nonlinear(u) + control) + dW / sqrt(rho)

with boundary rows pinned for Dirichlet problems and mirrored ghost
nodes folded into the operator for Neumann problems. The simply
supported beam is lifted to (deflection, velocity); its zero-moment
boundary condition makes the discrete fourth derivative the square of
the Dirichlet Laplacian, and control/noise force the velocity channel
only.

Steppers are pure functions of (state, inputs) given the prefactored
operators, so rollouts can be batched or parallelized freely. Divergence
(NaN from explicit terms) raises in the single-step API and is recorded
as a mask in the batched rollout path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import rng as rng_mod
from .fields import Grid, make_grid, sample_noise_block


class DivergedRolloutError(RuntimeError):
    """A trajectory left the representable range (NaN/inf state)."""


@dataclass
class SystemConfig:
    """Physical and discretization parameters for one testbed.

    Only the fields relevant to the chosen system are consulted; rho
    weights the noise as 1/sqrt(rho) against the control drift.
    """

    system: str
    dt: float
    horizon: float
    rho: float
    grid_extent: tuple[float, ...] = (1.0,)
    grid_points: int = 64
    epsilon: float = 1.0          # diffusivity / viscosity
    alpha: float = -0.5           # bistable reaction speed parameter
    c_d: float = 1e-4             # strain-rate (Kelvin-Voigt) damping
    mu: float = 0.01              # viscous damping
    rho_m: float = 1.0            # material density
    k_tensile: float = 40.0      # tensile stiffness
    mu_shear: float = 20.0       # shear modulus
    tau: float = 0.05             # retardation time of the viscous stress
    gravity: float = 9.81
    gravity_scale: float = 1.0
    actuation_gain: float = 0.1   # rest-length change per unit command
    particles: tuple[int, int] = (9, 3)
    particle_spacing: float = 0.5
    ic_amplitude: float = 0.05

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.horizon < self.dt:
            raise ValueError("horizon must be at least one step")
        if self.rho <= 0:
            raise ValueError("rho must be positive")
        if np.isscalar(self.grid_extent):
            self.grid_extent = (float(self.grid_extent),)
        else:
            self.grid_extent = tuple(float(e) for e in self.grid_extent)

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.dt))


def _banded_identity_rows(c: float, n: int, neumann: bool = False) -> np.ndarray:
    """(I - c L) in solve_banded layout; Dirichlet pins ends, Neumann mirrors."""
    ab = np.zeros((3, n))
    ab[1, :] = 1.0 + 2.0 * c
    ab[0, 1:] = -c       # superdiagonal
    ab[2, :-1] = -c      # subdiagonal
    if neumann:
        ab[0, 1] = -2.0 * c
        ab[2, -2] = -2.0 * c
    else:
        ab[1, 0] = ab[1, -1] = 1.0
        ab[0, 1] = 0.0
        ab[2, -2] = 0.0
    return ab


class _Additive1D:
    """Shared machinery for 1D systems with additive control and noise."""

    state_channels = 1
    noise_channels = 1
    control_channel_multiplicity = 1

    def __init__(self, cfg: SystemConfig):
        self.cfg = cfg
        self.grid = make_grid(1, cfg.grid_extent, cfg.grid_points)
        self.dx = self.grid.spacing[0]
        self.noise_scale = 1.0 / np.sqrt(cfg.rho)

    @property
    def n_steps(self) -> int:
        return self.cfg.n_steps

    def step(self, state: np.ndarray, control_field: np.ndarray, dw: np.ndarray) -> np.ndarray:
        """Single step on one state; accepts (n,) or (channels, n) arrays."""
        state = np.asarray(state, dtype=np.float64)
        dw = np.asarray(dw, dtype=np.float64)
        single = state.ndim == 1
        s = state[None, None, :] if single else state[None]
        d = dw[None, None, :] if dw.ndim == 1 else dw[None]
        out = self.step_fields_batch(s, np.asarray(control_field, dtype=np.float64)[None, :], d)[0]
        if not np.all(np.isfinite(out)):
            raise DivergedRolloutError(f"{self.cfg.system} state left the finite range")
        return out[0] if single else out

    def step_batch(self, states, controls, dw, m_rows) -> np.ndarray:
        fields = controls @ m_rows if m_rows is not None and m_rows.size else \
            np.zeros((states.shape[0], self.grid.n_nodes))
        return self.step_fields_batch(states, fields, dw)


class Heat1D(_Additive1D):
    """du = eps u_xx dt + control dt + noise, u pinned to 0 at both ends."""

    def __init__(self, cfg: SystemConfig):
        super().__init__(cfg)
        self._ab = _banded_identity_rows(cfg.epsilon * cfg.dt / self.dx**2, self.grid.n_nodes)
        self.boundary_value = 0.0

    def initial_state(self) -> np.ndarray:
        return np.zeros((1, self.grid.n_nodes))

    def _rhs(self, u, fields, dw):
        return u + self.cfg.dt * fields + self.noise_scale * dw

    def step_fields_batch(self, states, fields, dw) -> np.ndarray:
        rhs = self._rhs(states[:, 0], fields, dw[:, 0])
        rhs[:, 0] = rhs[:, -1] = self.boundary_value
        return sla.solve_banded((1, 1), self._ab, rhs.T, check_finite=False).T[:, None, :]


class Burgers1D(Heat1D):
    """dh = (eps h_xx - h h_x) dt + control dt + noise, ends pinned to 1."""

    def __init__(self, cfg: SystemConfig):
        super().__init__(cfg)
        self.boundary_value = 1.0

    def initial_state(self) -> np.ndarray:
        return np.ones((1, self.grid.n_nodes))

    def _rhs(self, h, fields, dw):
        adv = np.zeros_like(h)
        adv[:, 1:-1] = -h[:, 1:-1] * (h[:, 2:] - h[:, :-2]) / (2.0 * self.dx)
        return h + self.cfg.dt * (adv + fields) + self.noise_scale * dw


class Nagumo1D(_Additive1D):
    """dh = (eps h_xx + h(1-h)(h-alpha)) dt + control dt + noise, no-flux ends."""

    def __init__(self, cfg: SystemConfig):
        super().__init__(cfg)
        self._ab = _banded_identity_rows(
            cfg.epsilon * cfg.dt / self.dx**2, self.grid.n_nodes, neumann=True
        )

    def initial_state(self) -> np.ndarray:
        x = self.grid.axis_coords(0)
        return (1.0 / (1.0 + np.exp(-(2.0 - x) / np.sqrt(2.0))))[None, :]

    def step_fields_batch(self, states, fields, dw) -> np.ndarray:
        h = states[:, 0]
        reaction = h * (1.0 - h) * (h - self.cfg.alpha)
        rhs = h + self.cfg.dt * (reaction + fields) + self.noise_scale * dw[:, 0]
        return sla.solve_banded((1, 1), self._ab, rhs.T, check_finite=False).T[:, None, :]


class EulerBernoulli1D(_Additive1D):
    """Simply supported damped beam lifted to (deflection y, velocity v).

    Backward Euler on the full linear operator; the biharmonic with
    zero-displacement, zero-moment ends is the squared Dirichlet
    Laplacian on the interior. Control and noise force v only.
    """

    state_channels = 2

    def __init__(self, cfg: SystemConfig):
        super().__init__(cfg)
        n = self.grid.n_nodes
        ni = n - 2
        lap = sp.diags_array(
            [np.full(ni - 1, 1.0), np.full(ni, -2.0), np.full(ni - 1, 1.0)],
            offsets=[-1, 0, 1],
        ) / self.dx**2
        a0 = (lap @ lap).tocsc()
        self._a0 = a0
        eye = sp.eye_array(ni, format="csc")
        dt = cfg.dt
        m = sp.block_array(
            [
                [eye, -dt * eye],
                [dt * a0, (1.0 + dt * cfg.mu) * eye + dt * cfg.c_d * a0],
            ]
        ).tocsc()
        self._lu = spla.splu(m)
        self._ni = ni

    def initial_state(self) -> np.ndarray:
        x = self.grid.axis_coords(0)
        a = self.grid.extents[0]
        y0 = self.cfg.ic_amplitude * (
            np.sin(2.0 * np.pi * x / a) + 0.5 * np.sin(3.0 * np.pi * x / a)
        )
        return np.stack([y0, np.zeros_like(y0)])

    def curvature(self, y: np.ndarray) -> np.ndarray:
        """Discrete second derivative of a deflection profile (full field)."""
        out = np.zeros_like(y)
        out[..., 1:-1] = (y[..., 2:] - 2.0 * y[..., 1:-1] + y[..., :-2]) / self.dx**2
        return out

    def step_fields_batch(self, states, fields, dw) -> np.ndarray:
        b, _, n = states.shape
        dt = self.cfg.dt
        rhs = np.empty((b, 2 * self._ni))
        rhs[:, : self._ni] = states[:, 0, 1:-1]
        rhs[:, self._ni:] = (
            states[:, 1, 1:-1]
            + dt * fields[:, 1:-1]
            + self.noise_scale * dw[:, 0, 1:-1]
        )
        sol = self._lu.solve(rhs.T).T
        out = np.zeros((b, 2, n))
        out[:, 0, 1:-1] = sol[:, : self._ni]
        out[:, 1, 1:-1] = sol[:, self._ni:]
        return out


class Heat2D:
    """2D heat equation, 5-point Laplacian, boundary ring pinned to 0."""

    state_channels = 1
    noise_channels = 1
    control_channel_multiplicity = 1

    def __init__(self, cfg: SystemConfig):
        self.cfg = cfg
        self.grid = make_grid(2, cfg.grid_extent, cfg.grid_points)
        self.noise_scale = 1.0 / np.sqrt(cfg.rho)
        j = cfg.grid_points
        n = self.grid.n_nodes
        dx, dy = self.grid.spacing
        c = cfg.epsilon * cfg.dt
        ix, iy = np.divmod(np.arange(n), j)
        interior = (ix > 0) & (ix < j - 1) & (iy > 0) & (iy < j - 1)
        self._interior = interior
        rows, cols, vals = [], [], []
        diag = np.ones(n)
        diag[interior] = 1.0 + 2.0 * c / dx**2 + 2.0 * c / dy**2
        for off, coef in (
            (j, -c / dx**2), (-j, -c / dx**2), (1, -c / dy**2), (-1, -c / dy**2)
        ):
            idx = np.nonzero(interior)[0]
            rows.append(idx)
            cols.append(idx + off)
            vals.append(np.full(idx.size, coef))
        rows.append(np.arange(n))
        cols.append(np.arange(n))
        vals.append(diag)
        m = sp.csc_array(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(n, n),
        )
        self._lu = spla.splu(m)

    @property
    def n_steps(self) -> int:
        return self.cfg.n_steps

    def initial_state(self) -> np.ndarray:
        return np.zeros((1, self.grid.n_nodes))

    def step(self, state, control_field, dw) -> np.ndarray:
        state = np.asarray(state, dtype=np.float64)
        dw = np.asarray(dw, dtype=np.float64)
        single = state.ndim == 1
        s = state[None, None, :] if single else state[None]
        d = dw[None, None, :] if dw.ndim == 1 else dw[None]
        out = self.step_fields_batch(s, np.asarray(control_field, dtype=np.float64)[None, :], d)[0]
        if not np.all(np.isfinite(out)):
            raise DivergedRolloutError("heat2d state left the finite range")
        return out[0] if single else out

    def step_batch(self, states, controls, dw, m_rows) -> np.ndarray:
        fields = controls @ m_rows if m_rows is not None and m_rows.size else \
            np.zeros((states.shape[0], self.grid.n_nodes))
        return self.step_fields_batch(states, fields, dw)

    def step_fields_batch(self, states, fields, dw) -> np.ndarray:
        rhs = states[:, 0] + self.cfg.dt * fields + self.noise_scale * dw[:, 0]
        rhs[:, ~self._interior] = 0.0
        return self._lu.solve(rhs.T).T[:, None, :]


@dataclass
class Trajectory:
    """One simulated path with everything the loss needs recorded."""

    grid: object
    dt: float
    states: np.ndarray    # (T+1, C, n)
    controls: np.ndarray  # (T, N)
    noises: np.ndarray    # (T, channels, n)

    def __post_init__(self):
        if self.states.shape[0] != self.controls.shape[0] + 1:
            raise ValueError("trajectory must hold one more state than controls")
        if self.controls.shape[0] != self.noises.shape[0]:
            raise ValueError("one noise increment per control step required")


@dataclass
class RolloutBatch:
    """R trajectories stacked along the leading axis."""

    grid: object
    dt: float
    states: np.ndarray    # (R, T+1, C, n)
    controls: np.ndarray  # (R, T, N)
    noises: np.ndarray    # (R, T, channels, n)
    diverged: np.ndarray  # (R,) bool

    @property
    def n_rollouts(self) -> int:
        return self.states.shape[0]

    def trajectory(self, r: int) -> Trajectory:
        return Trajectory(self.grid, self.dt, self.states[r], self.controls[r],
                          self.noises[r])


def policy_inputs(states: np.ndarray, policy) -> np.ndarray:
    """Adapt a (B, C, n) state batch to the policy's input layout."""
    b = states.shape[0]
    if policy.kind == "cnn":
        c, h, w = policy.input_shape
        return states.reshape(b, c, h, w)
    return states.reshape(b, -1)


def rollout_batch(
    system,
    policy,
    m_rows: np.ndarray | None,
    n_rollouts: int,
    seed: int,
    iteration: int = 0,
    apply_control: bool = True,
    noise_on: bool = True,
    domain: int = rng_mod.NOISE,
) -> RolloutBatch:
    """Simulate R independent trajectories under the current policy.

    Noise for rollout r comes from the stream keyed by
    (seed, domain, iteration, r), so results do not depend on batch
    shape or worker layout. Controls are evaluated from the state at
    step t and applied over [t, t+dt).
    """
    cfg = system.cfg
    steps = system.n_steps
    grid = system.grid
    ch = system.noise_channels
    n_act = m_rows.shape[0] if m_rows is not None and m_rows.size else 0

    noises = np.empty((n_rollouts, steps, ch, grid.n_nodes))
    for r in range(n_rollouts):
        gen = rng_mod.stream(seed, domain, iteration, r)
        noises[r] = sample_noise_block(grid, cfg.dt, gen, steps, ch)
    if not noise_on:
        noises[:] = 0.0

    states = np.empty((n_rollouts, steps + 1, system.state_channels, grid.n_nodes))
    states[:, 0] = system.initial_state()[None]
    controls = np.zeros((n_rollouts, steps, n_act))

    current = states[:, 0].copy()
    # divergence shows up as NaN/inf and is reported via the mask; the
    # intermediate overflow warnings carry no extra information
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(steps):
            if apply_control and n_act:
                u, _ = policy.forward_batch(policy_inputs(current, policy))
                controls[:, t] = u
            current = system.step_batch(current, controls[:, t], noises[:, t], m_rows)
            states[:, t + 1] = current

    diverged = ~np.isfinite(states.reshape(n_rollouts, -1)).all(axis=1)
    return RolloutBatch(grid, cfg.dt, states, controls, noises, diverged)


def rollout(
    system, policy, m_rows, seed: int, iteration: int = 0, rollout_index: int = 0,
    apply_control: bool = True, noise_on: bool = True, domain: int = rng_mod.NOISE,
) -> Trajectory:
    """Single trajectory; reproduces row `rollout_index` of a batch."""
    cfg = system.cfg
    steps = system.n_steps
    grid = system.grid
    gen = rng_mod.stream(seed, domain, iteration, rollout_index)
    noises = sample_noise_block(grid, cfg.dt, gen, steps, system.noise_channels)
    if not noise_on:
        noises = np.zeros_like(noises)
    n_act = m_rows.shape[0] if m_rows is not None and m_rows.size else 0

    states = np.empty((steps + 1, system.state_channels, grid.n_nodes))
    states[0] = system.initial_state()
    controls = np.zeros((steps, n_act))
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(steps):
            if apply_control and n_act:
                u, _ = policy.forward_batch(policy_inputs(states[t][None], policy))
                controls[t] = u[0]
            states[t + 1] = system.step_batch(
                states[t][None], controls[t][None], noises[t][None], m_rows
            )[0]
            if not np.all(np.isfinite(states[t + 1])):
                raise DivergedRolloutError(
                    f"{cfg.system} rollout diverged at step {t + 1}"
                )
    return Trajectory(grid, cfg.dt, states, controls, noises)


def make_system(cfg: SystemConfig):
    from .softbody import SoftLimb2D  # local import to avoid a cycle

    builders = {
        "heat1d": Heat1D,
        "burgers1d": Burgers1D,
        "nagumo": Nagumo1D,
        "euler_bernoulli": EulerBernoulli1D,
        "heat2d": Heat2D,
        "softlimb": SoftLimb2D,
    }
    if cfg.system not in builders:
        raise ValueError(f"unknown system {cfg.system!r}; known: {sorted(builders)}")
    return builders[cfg.system](cfg)
