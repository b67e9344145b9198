"""Attack-agnostic adversarial example detection from least significant
component and loss-curvature features."""

from headdet.attacks import AttackConfig, NoiseConfig, add_noise, bim, fgsm, pgd, run_attack
from headdet.curvature import ggn, head_feature, hessian_feature, modulus, softmax_ce_hessian
from headdet.detect import kde_fit, kde_score, ocsvm_fit, ocsvm_score
from headdet.experiment import ExperimentConfig, load_config, noise_robustness, run_experiment
from headdet.metrics import auc_score, roc_auc
from headdet.smallnet import NetworkModel, NetworkSpec, forward, init_model, train_sgd
from headdet.spectral import EigenBasis, eig_sym, fit_basis, lscf

__version__ = "0.1.0"
