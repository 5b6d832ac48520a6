"""Multiple-shooting latent-space optimization for inverse problems with
flow-matching generative models.

The trajectory between the latent code and the generated sample is represented
as explicit shooting points stitched by quadratic consistency penalties;
reconstruction alternates Gauss-Seidel backward sweeps over the shooting
points with a data-consistency proximal update, keeping at most one network
activation set alive at a time. A single-shooting baseline (backpropagation
through the full discretized ODE) and exact operation counters reproducing the
constant-versus-linear memory behavior are included.
"""

__version__ = "0.1.0"

from .counting import counters, OpCounters
from .errors import (
    ContractViolationError,
    CounterModelError,
    NumericError,
    SingularityError,
    SolverError,
    TrainingDivergedError,
    UnsupportedCombinationError,
)
from .flow import (
    AnalyticField,
    LearnedField,
    SyntheticDataset,
    TimeGrid,
    TrainSchedule,
    cfm_loss,
    euler_step,
    gronwall_check,
    integrate,
    linear_field,
    rotation_field_2d,
    sample,
    tanh_field,
    train_flow,
    zero_field,
)
from .net import (
    ActivationTape,
    Mlp,
    VelocityNet,
    load_checkpoint,
    net_forward,
    net_value,
    net_vjp_input,
    net_vjp_params,
    save_checkpoint,
)
from .operators import (
    LinearOperator,
    Observation,
    blur_operator,
    dense_operator,
    make_observation,
    mask_operator,
    psnr,
    subsample_operator,
)
from .priors import (
    InnerSchedule,
    LatentFit,
    OneNormFit,
    QuadraticFit,
    RadialPrior,
    ToyDecoder,
    data_update_iterative,
    identity_decoder,
    prox_one_norm,
    prox_quadratic,
    radial_grad,
    radial_value,
)
from .solver import (
    SolveResult,
    SolverConfig,
    Trajectory,
    backward_sweep,
    counter_report,
    d_flow_solve,
    estimate_block_lipschitz,
    full_gradient,
    full_gradient_step,
    init_trajectory,
    ms_flow_solve,
    trajectory_objective,
)
