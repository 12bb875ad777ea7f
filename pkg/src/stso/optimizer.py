"""Episodic co-design optimization of policy and actuator variables.

Each iteration simulates R noisy rollouts under the current policy and
scores them with an importance-sampled cost built from the recorded
noise increments:

    Jt_r = J_r + N_r / sqrt(rho) + P_r / 2
    N_r  = sum_t <control_field_t, dW_t>          (noise-control pairing)
    P_r  = dt sum_t u_t' Q u_t,  Q_ij = <m_i, m_j> (quadratic control)

Rollouts are weighted by the normalized exponential w_r of -rho Jt_r
(shifted by the batch minimum before exponentiation so magnitudes in the
hundreds cannot overflow), and the scalar loss is

    L = sum_r w_r (-sqrt(rho) N_r - rho/2 P_r).

Gradients treat the simulator as a black box: trajectory states are
frozen samples, and differentiation flows through every policy
evaluation inside N and P — including their appearance inside the
weights (the "literal" mode; a "detached" mode that stops gradients at
the weights is available behind a flag). The chain splits three ways:
into the network parameters via backprop, and into actuator placements
and widths via the closed-form derivatives of the influence bumps.

Placements update through a continuous virtual variable that
accumulates steps across iterations while the applied placement snaps
to the grid, so sub-spacing gradients are never rounded away.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .actuation import ActuatorDesign, InfluenceMatrix, influence, placement_gradient, \
    snap_to_grid, width_gradient
from .systems import RolloutBatch, Trajectory, rollout_batch, policy_inputs


class RunAbortedError(RuntimeError):
    """Too many rollouts diverged to assemble a usable batch."""


@dataclass(frozen=True)
class CostRegion:
    """Axis-aligned region with a desired value and weight."""

    bounds: tuple  # (lo, hi) in 1D; ((lox, hix), (loy, hiy)) in 2D
    target: float
    weight: float = 1.0
    channel: int = 0

    def node_mask(self, grid) -> np.ndarray:
        bounds = np.atleast_2d(np.asarray(self.bounds, dtype=np.float64))
        if bounds.shape != (grid.dim, 2):
            raise ValueError(f"region bounds {self.bounds} do not match grid dim {grid.dim}")
        extents = np.asarray(grid.extents)
        if np.any(bounds[:, 0] > bounds[:, 1]) or np.any(bounds[:, 0] < 0) \
                or np.any(bounds[:, 1] > extents):
            raise ValueError(f"region {self.bounds} outside domain {tuple(extents)}")
        coords = grid.node_coords
        mask = np.ones(grid.n_nodes, dtype=bool)
        for ax in range(grid.dim):
            mask &= (coords[:, ax] >= bounds[ax, 0]) & (coords[:, ax] <= bounds[ax, 1])
        if not mask.any():
            raise ValueError(f"region {self.bounds} contains no grid node")
        return mask


@dataclass(frozen=True)
class CostSpec:
    regions: tuple[CostRegion, ...]

    def __post_init__(self):
        if any(r.weight < 0 for r in self.regions):
            raise ValueError("cost weights must be nonnegative")

    def masks(self, grid) -> list[np.ndarray]:
        return [r.node_mask(grid) for r in self.regions]


def state_cost(states: np.ndarray, grid, spec: CostSpec) -> np.ndarray:
    """Accumulated squared deviation from targets on the cost regions.

    states: (..., T+1, C, n); summed over all time slices and region
    nodes, weighted per region. Returns one scalar per leading index.
    """
    states = np.asarray(states, dtype=np.float64)
    squeeze = states.ndim == 3
    if squeeze:
        states = states[None]
    total = np.zeros(states.shape[0])
    for region, mask in zip(spec.regions, spec.masks(grid)):
        err = states[:, :, region.channel, :][:, :, mask] - region.target
        total += region.weight * np.sum(err**2, axis=(1, 2))
    return total[0] if squeeze else total


def noise_projections(m_rows: np.ndarray, noises: np.ndarray, quad_weights: np.ndarray) -> np.ndarray:
    """<m_i, dW_t> per rollout, step and actuator; (R, T, N).

    Multi-channel noise pairs against the same scalar control field on
    every channel, so channels are summed.
    """
    nsum = noises.sum(axis=2)  # (R, T, n)
    return np.einsum("in,rtn->rti", m_rows * quad_weights, nsum)


def control_gram(m_rows: np.ndarray, quad_weights: np.ndarray, multiplicity: int = 1) -> np.ndarray:
    return multiplicity * ((m_rows * quad_weights) @ m_rows.T)


def compute_N(trajectory: Trajectory, infl: InfluenceMatrix,
              controls: np.ndarray | None = None) -> float:
    """Pathwise noise-control inner product of one trajectory."""
    u = trajectory.controls if controls is None else np.asarray(controls)
    if u.shape[1] != infl.rows.shape[0]:
        raise ValueError("control count does not match actuator count")
    a = noise_projections(infl.rows, trajectory.noises[None], trajectory.grid.quadrature_weights)[0]
    return float(np.sum(u * a))


def compute_P(trajectory: Trajectory, infl: InfluenceMatrix,
              controls: np.ndarray | None = None) -> float:
    """Time-integrated quadratic control effort of one trajectory."""
    u = trajectory.controls if controls is None else np.asarray(controls)
    if u.shape[1] != infl.rows.shape[0]:
        raise ValueError("control count does not match actuator count")
    mult = trajectory.noises.shape[1]
    q = control_gram(infl.rows, trajectory.grid.quadrature_weights, mult)
    return float(trajectory.dt * np.einsum("ti,ij,tj->", u, q, u))


def importance_cost(j: float, n_val: float, p_val: float, rho: float):
    """State cost corrected by the measure-change terms."""
    return j + n_val / np.sqrt(rho) + 0.5 * p_val


def gibbs_weights(jt: np.ndarray, rho: float) -> np.ndarray:
    """Normalized exponential weights of -rho * Jt, overflow-safe."""
    jt = np.asarray(jt, dtype=np.float64)
    if jt.size == 0:
        raise ValueError("need at least one rollout")
    if not np.all(np.isfinite(jt)):
        raise ValueError("non-finite importance costs in batch")
    shifted = -rho * (jt - jt.min())
    w = np.exp(shifted)
    return w / w.sum()


def compute_loss(weights: np.ndarray, n_vals: np.ndarray, p_vals: np.ndarray, rho: float) -> float:
    per = -np.sqrt(rho) * n_vals - 0.5 * rho * p_vals
    return float(np.dot(weights, per))


@dataclass
class BatchStats:
    """Per-rollout scalars feeding the loss, plus the loss itself."""

    j: np.ndarray
    n_vals: np.ndarray
    p_vals: np.ndarray
    jt: np.ndarray
    weights: np.ndarray
    loss: float


def batch_stats(batch: RolloutBatch, m_rows: np.ndarray, cost_spec: CostSpec,
                rho: float, multiplicity: int = 1) -> BatchStats:
    qw = batch.grid.quadrature_weights
    j = state_cost(batch.states, batch.grid, cost_spec)
    a = noise_projections(m_rows, batch.noises, qw)
    n_vals = np.einsum("rti,rti->r", batch.controls, a)
    q = control_gram(m_rows, qw, multiplicity)
    p_vals = batch.dt * np.einsum("rti,ij,rtj->r", batch.controls, q, batch.controls)
    jt = importance_cost(j, n_vals, p_vals, rho)
    w = gibbs_weights(jt, rho)
    return BatchStats(j, n_vals, p_vals, jt, w, compute_loss(w, n_vals, p_vals, rho))


@dataclass
class LossGradients:
    theta: list[np.ndarray]
    placement: np.ndarray
    widths: np.ndarray
    stats: BatchStats


def loss_gradients(batch: RolloutBatch, policy, design: ActuatorDesign, grid,
                   cost_spec: CostSpec, rho: float, multiplicity: int = 1,
                   gradient_mode: str = "literal", chunk: int = 4096) -> LossGradients:
    """Gradients of the batch loss for all three variable groups.

    States are frozen samples; the chain runs through the recorded
    policy outputs inside N and P (and, in literal mode, through their
    appearance inside the exponential weights), then into the network by
    backprop and into placements/widths through the influence bumps.
    """
    if gradient_mode not in ("literal", "detached"):
        raise ValueError(f"unknown gradient mode {gradient_mode!r}")
    stats = batch_stats(batch, m_rows := influence(design, grid).rows, cost_spec,
                        rho, multiplicity)
    u = batch.controls
    r_count, t_count, n_act = u.shape
    qw = grid.quadrature_weights
    sqrt_rho = np.sqrt(rho)

    per_rollout = -sqrt_rho * stats.n_vals - 0.5 * rho * stats.p_vals
    d_n = -sqrt_rho * stats.weights
    d_p = -0.5 * rho * stats.weights
    if gradient_mode == "literal":
        d_jt = -rho * stats.weights * (per_rollout - stats.loss)
        d_n = d_n + d_jt / sqrt_rho
        d_p = d_p + 0.5 * d_jt

    a = noise_projections(m_rows, batch.noises, qw)
    q = control_gram(m_rows, qw, multiplicity)
    # upstream into each recorded control vector
    d_u = d_n[:, None, None] * a + (2.0 * batch.dt) * d_p[:, None, None] * (u @ q)

    # network parameters: recompute activations on the frozen states
    inputs = policy_inputs(batch.states[:, :t_count].reshape(r_count * t_count, *batch.states.shape[2:]), policy)
    upstream = d_u.reshape(r_count * t_count, n_act)
    grads_theta = [np.zeros_like(p) for p in policy.parameters()]
    for lo in range(0, inputs.shape[0], chunk):
        hi = min(lo + chunk, inputs.shape[0])
        _, cache = policy.forward_batch(inputs[lo:hi])
        gs, _ = policy.backward_batch(cache, upstream[lo:hi])
        for acc, g in zip(grads_theta, gs):
            acc += g

    # influence rows: dL/dm_i(node), then through the Gaussian closed form
    nsum = batch.noises.sum(axis=2)
    fields = np.einsum("rti,in->rtn", u, m_rows)
    d_m = np.einsum("r,rti,rtn->in", d_n, u, nsum) * qw
    d_m += (2.0 * batch.dt * multiplicity) * np.einsum("r,rti,rtn->in", d_p, u, fields) * qw
    grad_place = placement_gradient(d_m, design, grid)
    grad_width = width_gradient(d_m, design, grid)
    return LossGradients(grads_theta, grad_place, grad_width, stats)


@dataclass
class AdamState:
    """First/second moment accumulators for one parameter group."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def like(cls, params: list[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(state: AdamState, params: list[np.ndarray], grads: list[np.ndarray],
              lr: float) -> list[np.ndarray]:
    """Bias-corrected adaptive update; returns new parameter arrays."""
    state.step += 1
    t = state.step
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g**2
        m_hat = state.m[i] / (1.0 - state.beta1**t)
        v_hat = state.v[i] / (1.0 - state.beta2**t)
        out.append(p - lr * m_hat / (np.sqrt(v_hat) + state.eps))
    return out


@dataclass
class OptimizerSettings:
    iterations: int
    rollouts: int
    lr_policy: float = 1e-3
    lr_place: float = 3e-2
    lr_width: float = 1e-3
    gradient_mode: str = "literal"
    max_diverged_fraction: float = 0.2

    def __post_init__(self):
        if self.iterations < 1 or self.rollouts < 1:
            raise ValueError("need at least one iteration and one rollout")
        if self.gradient_mode not in ("literal", "detached"):
            raise ValueError(f"unknown gradient mode {self.gradient_mode!r}")


@dataclass
class AdamGroups:
    theta: AdamState
    place: AdamState
    width: AdamState

    @classmethod
    def fresh(cls, policy, design) -> "AdamGroups":
        return cls(
            AdamState.like(policy.parameters()),
            AdamState.like([design.virtual]),
            AdamState.like([design.widths]),
        )


@dataclass
class RunResult:
    rows: list[dict]
    policy: object
    design: ActuatorDesign
    adam: AdamGroups


def _filter_batch(batch: RolloutBatch, max_fraction: float, iteration: int) -> RolloutBatch:
    bad = batch.diverged
    if not bad.any():
        return batch
    frac = bad.mean()
    if frac >= max_fraction:
        raise RunAbortedError(
            f"iteration {iteration}: {int(bad.sum())}/{bad.size} rollouts diverged "
            f"({frac:.0%} >= {max_fraction:.0%} limit)"
        )
    keep = ~bad
    return RolloutBatch(batch.grid, batch.dt, batch.states[keep], batch.controls[keep],
                        batch.noises[keep], batch.diverged[keep])


def run(system, policy, design: ActuatorDesign, cost_spec: CostSpec,
        settings: OptimizerSettings, seed: int, start_iteration: int = 0,
        adam: AdamGroups | None = None, on_iteration=None) -> RunResult:
    """Joint training loop over policy and actuator variables.

    Per iteration: build the influence fields at the snapped placements,
    roll out, score, differentiate, and apply one adaptive step per
    variable group, snapping the virtual placements back to the grid.
    Deterministic given the seed: rollout noise is keyed by
    (seed, iteration, rollout), so runs resumed at any iteration
    reproduce the uninterrupted sequence.
    """
    cost_spec.masks(system.grid)  # validate regions against this grid
    grid = system.grid
    mult = system.control_channel_multiplicity
    width_floor = 0.5 * max(grid.spacing)
    if adam is None:
        adam = AdamGroups.fresh(policy, design)
    rows = []
    for k in range(start_iteration, settings.iterations):
        m_rows = influence(design, grid).rows
        batch = rollout_batch(system, policy, m_rows, settings.rollouts, seed, iteration=k)
        n_diverged = int(batch.diverged.sum())
        batch = _filter_batch(batch, settings.max_diverged_fraction, k)
        grads = loss_gradients(batch, policy, design, grid, cost_spec,
                               system.cfg.rho, mult, settings.gradient_mode)
        policy.set_parameters(adam_step(adam.theta, policy.parameters(),
                                        grads.theta, settings.lr_policy))
        design.widths = np.maximum(
            adam_step(adam.width, [design.widths], [grads.widths], settings.lr_width)[0],
            width_floor,
        )
        design.virtual = adam_step(adam.place, [design.virtual], [grads.placement],
                                   settings.lr_place)[0]
        design.snapped = snap_to_grid(grid, design.virtual)
        stats = grads.stats
        rows.append({
            "iteration": k,
            "loss": float(stats.loss),
            "mean_cost": float(stats.j.mean()),
            "min_cost": float(stats.j.min()),
            "max_cost": float(stats.j.max()),
            "positions": design.snapped.tolist(),
            "virtual_positions": design.virtual.tolist(),
            "widths": design.widths.tolist(),
            "diverged": n_diverged,
        })
        if on_iteration is not None:
            on_iteration(k, policy, design, adam, rows[-1])
    return RunResult(rows, policy, design, adam)
