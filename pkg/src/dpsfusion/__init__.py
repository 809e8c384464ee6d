"""Full-field response reconstruction from sparse sensors with diffusion
posterior sampling over a learned score prior."""

from .diffusion import (
    NoiseSchedule,
    dsm_loss,
    forward_diffuse_step,
    make_linear_schedule,
    reverse_step_unconditional,
    sample_xt_given_x0,
)
from .dps import (
    MeasurementChannel,
    ReconstructionResult,
    dps_sample,
    estimate_x0_hat,
    likelihood_guidance,
    sample_unconditional,
    zeta_from_noise,
)
from .evaluation import SweepSpec, run_sweep, wmape
from .forwardmodels import MLPSurrogate, SensorLayout, cs_apply, ds_apply, nn_apply, train_surrogate
from .scorenet import ScoreNetwork, TrainOpts, UNetConfig, score, train_score
from .synthdata import DatasetStats, GeneratorConfig, add_noise, denormalize, generate_dataset, normalize, place_sensors

__version__ = "0.1.0"
