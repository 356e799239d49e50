"""Dual-query decoder, repulsive point matching, losses and metrics at desk scale."""
from .decoder import DecoderConfig, filter_predictions, forward
from .losses import LossConfig, classification_loss, focal_term, localization_loss, total_loss
from .matching import (Assignment, CostWeights, RepulsiveForm, Variant, ambiguity_ratio, assign,
                       match_cost, oracle_assign, repulsive_cost, solve_assignment)
from .metrics import MetricsReport, counting_errors, evaluate, localize_match, prf1
from .model import (FeatureGrid, Point2, Prediction, Scene, SceneFormatError, TokenSet, load_predictions,
                    load_scene, save_predictions, save_scene, validate_scene)
from .synthlab import GeneratorConfig, ambiguity_experiment, generate_scene, perturb_predictions, repulsion_ablation

__version__ = "0.1.0"
