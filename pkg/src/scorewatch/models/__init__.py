"""Model programs whose parameters the detector monitors, plus MLE fitting."""

from .arma import ArmaModel, ArmaSpec, arma_loglik, coefficients_from_roots
from .base import ModelProgram, ObservationSequence, SegmentView, SimplexReparam
from .fit import FitResult, fit_mle
from .hmm import HmmModel, HmmSpec, default_sigmas, hmm_loglik
from .linear import LinearModel, MlpModel, linear_model, mlp_model
from .topic import TopicModel, TopicModelSpec, topic_model_loglik

__all__ = [
    "ArmaModel", "ArmaSpec", "FitResult", "HmmModel", "HmmSpec", "LinearModel",
    "MlpModel", "ModelProgram", "ObservationSequence", "SegmentView", "SimplexReparam",
    "TopicModel", "TopicModelSpec", "arma_loglik", "coefficients_from_roots",
    "default_sigmas", "fit_mle", "hmm_loglik", "linear_model", "mlp_model",
    "topic_model_loglik",
]
