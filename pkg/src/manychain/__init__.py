"""manychain: lockstep multi-chain HMC on CPU with precision-aware numerics."""

from .diagnostics import (
    DegenerateTraceError,
    DiagnosticsReport,
    StreamingMoments,
    chees,
    esjd,
    ess,
    harmonic_mean_acceptance,
    report_from_trace,
    roundoff_suspicion,
    split_rhat,
    streaming_rhat,
    welford_init,
    welford_merge,
    welford_update,
)
from .gradients import FiniteDifferenceReport, finite_difference_check, value_and_grad
from .model import (
    ConstrainedParams,
    Dataset,
    DatasetError,
    GaussianTarget,
    ModelTarget,
    constrain,
    generate_synthetic,
    joint_log_prob,
    load_csv_dataset,
    log_prob_ratio,
    replicate_dataset,
    unconstrained_log_prob,
)
from .prng import RandomKey, fold_in, key_from_seed, normal, randint, split, uniform
from .sampler import (
    ChainBatch,
    HmcConfig,
    LockstepViolationError,
    MomentsSink,
    RunSummary,
    StepOutput,
    TraceSink,
    WarmupInfo,
    adapt_step_size,
    draw_trajectory_length,
    estimate_diag_mass,
    hmc_step,
    leapfrog_step,
    run_chains,
    warmup_adapt,
)

__version__ = "0.1.0"
