"""Uncertainty quantification for neural regression: MC-Dropout, deep and bootstrap ensembles,
aleatoric/epistemic decomposition, ranking and calibration metrics, domain-shift evaluation."""

from .calibration import (
    CalibrationConfig,
    auce_mce,
    coverage_curve,
    dispersion,
    error_calibration,
    inverse_normal_cdf,
)
from .data import Dataset, SplitSpec, SyntheticSpec, bootstrap_indices, generate_synthetic, load_csv, split
from .estimators import EnsembleConfig, MemberOutputs, UQPredictions, aggregate, mc_dropout_predict
from .model import AnchorConfig, HeteroModel, TrainConfig, backward, forward, gaussian_nll_loss, init_model, train
from .ranking import RankingConfig, auco, confidence_curve, decrease_ratio, error_drop, oracle_curve

__version__ = "0.1.0"
