"""Fair binary classification by aligning per-subgroup decision rationales.

Numpy-only reverse-mode autodiff, a small MLP, group fairness metrics,
ablation-based parity scores with their first-order Taylor surrogate, and
trainers for ERM, oversampling, fairness regularization and rationale
alignment.
"""

from .autodiff import Node, Tape, finite_difference, gradient
from .data import DatasetTable, Schema, load_adult, load_csv, prepare, split, subgroup, synth_biased
from .metrics import (SubgroupPredictions, average_precision, eop_ratio, hard_dp, hard_eo, pp_diff,
                      relaxed_dp, relaxed_eo, relaxed_eop, relaxed_pp)
from .network import MlpParams, MlpSpec, init, predict
from .rationale import (ParityReport, alignment_loss, exact_loss_change, exact_parity, layer_normalize,
                        network_parity, taylor_importance)
from .training import TrainConfig, TrainingDiverged, train

__version__ = "0.1.0"

__all__ = [
    "Node", "Tape", "finite_difference", "gradient",
    "DatasetTable", "Schema", "load_adult", "load_csv", "prepare", "split", "subgroup", "synth_biased",
    "SubgroupPredictions", "average_precision", "eop_ratio", "hard_dp", "hard_eo", "pp_diff",
    "relaxed_dp", "relaxed_eo", "relaxed_eop", "relaxed_pp",
    "MlpParams", "MlpSpec", "init", "predict",
    "ParityReport", "alignment_loss", "exact_loss_change", "exact_parity", "layer_normalize",
    "network_parity", "taylor_importance",
    "TrainConfig", "TrainingDiverged", "train",
]
