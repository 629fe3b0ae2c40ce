"""Learning from label proportions with bag-level KL and transport losses."""

from .bags import Bag, BagDataset, LabeledDataset, compute_proportions, load_bags, make_bags, save_bags
from .losses import (
    Divergence,
    GradMode,
    LossKind,
    PredictionMatrix,
    RotConfig,
    SinkhornDiverged,
    TransportPlan,
    avg_instance_kl,
    kl_loss,
    prop_loss,
    rot_loss,
    rot_loss_gradient,
    sinkhorn_residual,
)
from .model import ModelSpec, ParamStore, forward, forward_bag, grad_check, init_params
from .oracles import comb_loss_binary, comb_loss_exact, relax_lp_loss_exact
from .trainer import TrainConfig, TrainingError, empirical_risk, evaluate, sgd_step, train

__version__ = "0.1.0"
