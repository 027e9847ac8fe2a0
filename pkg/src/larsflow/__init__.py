"""Normalizing flows with resampled (learned accept/reject) bases."""

import os as _os

# Cap BLAS threading before numpy loads. 0 or unset means "auto".
_threads = _os.environ.get("LARS_FLOWS_THREADS")
if _threads is not None and _threads.isdigit() and int(_threads) > 0:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

from .bases import (
    GaussianMixture,
    GroupedResampledBase,
    ResampledBase,
    StandardGaussian,
    exact_z_quadrature,
    grouped_log_prob,
    grouped_sample,
    lars_ema_update,
    lars_estimate_z,
    lars_log_prob,
    lars_sample,
    make_acceptance_net,
    mixture_init,
    mixture_log_prob,
    mixture_sample,
    std_normal_log_prob,
)
from .checkpoint import checkpoint_load, checkpoint_save
from .data import load_csv_dataset
from .errors import (
    CheckpointError,
    ConfigError,
    DataError,
    LarsFlowError,
    NumericsError,
    TrainingDiverged,
)
from .evaluation import (
    DensityGrid,
    ModelDensityTarget,
    dataset_ll,
    export_density_grid,
    histogram_kld,
    quadrature_kld,
    refresh_normalizer,
    refreshed_normalizer,
)
from .flows import (
    AffineConstant,
    CouplingLayer,
    FlowModel,
    InvertibleLinear,
    alternating_mask,
    flow_log_prob,
    flow_param_grads,
    flow_sample,
    layer_apply,
    make_coupling_net,
)
from .nets import ForwardCache, MlpParams, MlpSpec, mlp_backward, mlp_forward, mlp_init
from .rng import Grid2D, RngStream, derive_stream, draw_standard_normal, log_sum_exp
from .targets import Target2D, make_target, target_log_unnorm, target_rejection_sample
from .training import (
    AdamState,
    MetricsTrace,
    TrainConfig,
    adam_step,
    kl_grad_phi,
    kl_grad_theta,
    nll_step,
    polyak_update,
    train_kl,
    train_ml,
)

__version__ = "0.1.0"
