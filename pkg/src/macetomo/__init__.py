"""Distributed model-based CT reconstruction via multi-agent consensus
equilibrium, with partial-update proximal agents, PnP denoiser priors, and a
dense analysis suite for verifying exactness and convergence on small
problems."""

from .denoisers import DenoiserSpec, denoise, make_denoiser
from .geometry import (
    Geometry,
    SparseViewMatrix,
    ViewSubset,
    back_project,
    build_system_matrix,
    forward_project,
    load_system_matrix,
    partition_views,
    roi_mask,
    save_system_matrix,
)
from .icd import (
    AgentWorkspace,
    ConvergenceError,
    icd_map_solve,
    partial_update_prox,
    pixel_update,
    prox_solve,
)
from .mace import (
    MaceConfig,
    MaceResult,
    ResidualReport,
    WorkerPool,
    average,
    consensus_G,
    consensus_GH,
    equilibrium_residuals,
    mace_pnp_solve,
    mace_solve,
    mann_step,
    new_stack,
    reflect_G,
)
from .models import (
    PriorParams,
    ReconProblem,
    WeightModel,
    likelihood_cost,
    local_cost,
    map_cost,
    prior_cost,
)
from .oracle import (
    EquitCounter,
    IterationMatrixReport,
    assemble_iteration_matrices,
    dense_map_oracle,
    dense_prox_oracle,
    equits,
    nrmse,
    partial_update_closed_form,
    serial_pnp_oracle,
    speedup,
)

__version__ = "0.1.0"
