"""Desk-scale personalized federated learning with two-teacher distillation."""

from .data import DataConfig, SampleBatch, accuracy, generate, load_dataset, save_dataset, subsample_labels
from .errors import CheckpointError, ConfigError, ContractError, FedL2TError, InputError
from .federation import (
    ALGORITHMS,
    AlgorithmRun,
    ClientState,
    CrossClientQueue,
    GlobalState,
    HyperParams,
    RoundMetrics,
    aggregate,
    build_clients,
    client_update_fedl2t,
    generate_queue,
    normalize_algorithm,
    run_algorithm,
    run_experiment,
    run_round,
)
from .harness import (
    Checkpoint,
    ExperimentConfig,
    ExperimentResult,
    checkpoint,
    config_from_text,
    config_to_text,
    default_config,
    export_results,
    export_sweep,
    load_config,
    restore,
    resume_comparison,
    run_comparison,
    run_comparison_halting,
    run_single,
    run_sweep,
)
from .losses import (
    LossTerm,
    adaptive_scale,
    combine,
    compose_P_loss,
    compose_T_loss,
    kl_output,
    mse_features,
    proximal,
    task_ce,
)
from .nn import (
    ForwardTrace,
    GradBuffer,
    ModelParams,
    ModelSpec,
    backward,
    forward,
    init_model,
    param_sq_distance,
    sgd_step,
    softmax,
)

__version__ = "0.1.0"
