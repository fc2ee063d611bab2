"""Conformal early-exit inference for ensembles of spiking classifiers.

Train small spiking-network ensembles (independent initializations or
variational posterior samples), score inputs incrementally at checkpoints,
pool evidence across members, and stop inference adaptively while meeting a
target coverage level.
"""

__version__ = "0.1.0"

from spikecp.conformal import (
    AdaptiveDecision,
    CalibrationTable,
    SpikeCPConfig,
    UnsupportedMergeExponent,
    calibrate_dc_threshold,
    cm_pool,
    dc_snn_decide,
    p_value,
    pm_pool,
    predictive_set,
    spikecp_decide,
    stopping_time,
)
from spikecp.experiments import (
    ExperimentReport,
    SyntheticSpec,
    generate_dataset,
    run_experiment,
    split_cal_test,
    sweep,
    validity_monte_carlo,
)
from spikecp.snn import (
    Architecture,
    InputSequence,
    ModelParams,
    NeuronState,
    ScoreTrace,
    confidence,
    forward,
    log_loss,
    spike_count,
    srm_step,
)
from spikecp.training import (
    Ensemble,
    TrainConfig,
    VariationalPosterior,
    sample_ensemble,
    train_deep_ensemble,
    train_single,
    train_vi,
)

__all__ = [
    "AdaptiveDecision",
    "Architecture",
    "CalibrationTable",
    "Ensemble",
    "ExperimentReport",
    "InputSequence",
    "ModelParams",
    "NeuronState",
    "ScoreTrace",
    "SpikeCPConfig",
    "SyntheticSpec",
    "TrainConfig",
    "UnsupportedMergeExponent",
    "VariationalPosterior",
    "calibrate_dc_threshold",
    "cm_pool",
    "confidence",
    "dc_snn_decide",
    "forward",
    "generate_dataset",
    "log_loss",
    "p_value",
    "pm_pool",
    "predictive_set",
    "run_experiment",
    "sample_ensemble",
    "spike_count",
    "spikecp_decide",
    "split_cal_test",
    "srm_step",
    "stopping_time",
    "sweep",
    "train_deep_ensemble",
    "train_single",
    "train_vi",
    "validity_monte_carlo",
]
