"""Multimodal deep survival analysis: 3-D ResNet image features fused with clinical features."""

from .baselines import CoxModel, StepFunction, cox_fit, cox_risk_scores, kaplan_meier, nelson_aalen
from .data import Cohort, SurvivalRecord, SynthSpec, generate_synthetic_cohort, load_cohort, split_folds
from .metrics import EvalSample, UndefinedMetricError, c_index, mae_uncensored
from .model import DeepMMSA, ModelConfig, build_model, load_model, save_model
from .train import TrainConfig, evaluate_fold, lr_at, run_ablation, run_cv, train_fold

__version__ = "0.1.0"
