"""Sampling-based joint policy and actuator co-design for stochastic PDEs.

The library simulates distributed-parameter systems driven by
spatially-white noise, scores noisy rollouts with an exponentially
weighted importance-sampled cost, and descends its gradients jointly in
the policy network weights, the actuator placements (snapped to the
grid through a continuous virtual variable), and the actuator widths.
"""

from .actuation import (ActuatorDesign, InfluenceMatrix, influence, init_actuators,
                        placement_gradient, snap_to_grid, width_gradient)
from .fields import (Field, Grid, NoiseIncrement, StateVector, inner_product,
                     make_grid, one_hot_basis, sample_cylindrical_increment,
                     sample_noise_block)
from .optimizer import (AdamGroups, AdamState, BatchStats, CostRegion, CostSpec,
                        OptimizerSettings, RunAbortedError, adam_step, batch_stats,
                        compute_loss, compute_N, compute_P, gibbs_weights,
                        importance_cost, loss_gradients, run, state_cost)
from .policy import CnnPolicy, MlpPolicy, policy_from_spec, sparse_forward_pass, \
    xavier_init
from .softbody import ParticleLattice, SoftLimb2D
from .systems import (Burgers1D, DivergedRolloutError, EulerBernoulli1D, Heat1D,
                      Heat2D, Nagumo1D, RolloutBatch, SystemConfig, Trajectory,
                      make_system, rollout, rollout_batch)

__version__ = "0.1.0"
