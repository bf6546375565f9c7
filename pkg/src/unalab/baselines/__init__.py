"""Comparison models: deep ensembles, MC dropout, SNGP and an HMC-sampled BNN."""

from .ensembles import (
    EnsembleConfig,
    EnsembleModel,
    anchored_loss_and_grad,
    ensemble_predict,
    train_ensemble,
)
from .hmc import HmcConfig, HmcResult, bnn_hmc_predict, bnn_potential, hmc_sample
from .mcd import McdConfig, McdModel, dropout_masks, mcd_predict, mcd_train
from .sngp import SngpConfig, SngpModel, rff_features, sngp_predict, spectral_normalize, train_sngp

__all__ = [
    "EnsembleConfig", "EnsembleModel", "anchored_loss_and_grad", "ensemble_predict",
    "train_ensemble", "HmcConfig", "HmcResult", "bnn_hmc_predict", "bnn_potential",
    "hmc_sample", "McdConfig", "McdModel", "dropout_masks", "mcd_predict", "mcd_train",
    "SngpConfig", "SngpModel", "rff_features", "sngp_predict", "spectral_normalize",
    "train_sngp",
]
