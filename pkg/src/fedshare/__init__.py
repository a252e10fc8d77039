"""Clustered data-sharing federated learning simulator."""

from .clustering import (
    Clustering,
    brute_force_optimal,
    cec_clustering,
    check_condition2,
    check_condition3,
    check_conditions,
    check_constraints,
    daca,
    objective,
    scc_clustering,
)
from .config import ExperimentConfig, derive_seed
from .distributions import (
    ClientProfile,
    LabelDistribution,
    SharingPlan,
    emd_to_global,
    global_distribution,
    mix_distribution,
    pairwise_emd,
    post_sharing_system_emd,
    system_emd,
)
from .experiment import run_experiment, sweep, time_account
from .fl import ModelParams, RoundMetrics, TrainConfig, aggregate, apply_sharing, evaluate, local_sgd, train_federated
from .network import ChannelParams, build_constrained_graph, draw_channel_gains, gen_social_graph, multicast_rate, sharing_delay
from .partition import partition_dirichlet, partition_pathological, synth_dataset

__version__ = "0.1.0"
