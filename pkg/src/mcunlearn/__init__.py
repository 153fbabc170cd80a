"""Bayesian posterior sampling with shift-based machine unlearning."""
from .diffmodel import BayesModel, DivergenceError, Example, LabeledDataset, potential
from .evaluation import (
    EvalReport,
    classification_error,
    knn_kl,
    knowledge_removal_estimator,
    mia_accuracy,
    mia_threshold,
    prediction_difference,
)
from .influence import (
    GMM_INFLUENCE,
    MLP_INFLUENCE,
    InfluenceConfig,
    LissaDivergenceError,
    influence_fn,
    lissa_inverse_hvp,
)
from .models import GaussianMeanModel, GmmModel, MlpClassifier, gaussian_closed_posterior
from .samplers import SampleSet, SamplerConfig, StepSchedule, continue_chain, run_chain
from .unlearn import UnlearnPlan, UnlearningError, apply_removal, unlearn_batches

__version__ = "0.1.0"
