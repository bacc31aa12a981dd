"""Multilevel logistic meta-regression of significance indicators.

Estimates are coded as t > threshold and modelled with a study-level
random effect, either independent across studies or correlated through
a co-authorship network.  Density-discontinuity tests, simulation and
delta-method predictions round out the toolkit.
"""

__version__ = "0.1.0"

from .domain import (DataError, Dataset, DesignMatrix, EstimateRecord, Formula, StudyRecord,
                     build_design, dichotomize, mundlak_augment, observed_power, parse_dataset, t_statistic)
from .network import CoauthorNetwork, build_adjacency
from .density import kde, local_poly_density, manipulation_test
from .glmm import (FittedModel, Independent, ModelSpec, SarNetwork, chibar_pvalue, fit, icc,
                   lr_chibar_test, loglik_independent, loglik_sar, sigma_matrix)
from .inference import mean_profile, predict_probability, probability_difference
from .simulate import SimConfig, simulate_dataset

__all__ = [
    "__version__", "DataError", "Dataset", "DesignMatrix", "EstimateRecord", "Formula", "StudyRecord",
    "build_design", "dichotomize", "mundlak_augment", "observed_power", "parse_dataset", "t_statistic",
    "CoauthorNetwork", "build_adjacency", "kde", "local_poly_density", "manipulation_test",
    "FittedModel", "Independent", "ModelSpec", "SarNetwork", "chibar_pvalue", "fit", "icc",
    "lr_chibar_test", "loglik_independent", "loglik_sar", "sigma_matrix",
    "mean_profile", "predict_probability", "probability_difference", "SimConfig", "simulate_dataset",
]
