"""Treatment-effect estimation with an identifiable VAE and a covariate-conditional prior."""
from .balancing import BalanceConfig, balanced_objective, sinkhorn, sinkhorn_distance
from .dataset import Dataset, Standardizer
from .estimation import EffectEstimate, ate, estimate_effects, latent_means
from .metrics import AffineFit, EvalReport, affine_recovery, eps_ate, evaluate, sqrt_pehe
from .model import DiagGaussian, IntactVAE, ModelConfig, NumericError, elbo, gaussian_kl, reparam_sample
from .synthetic import DGPSpec, SynthDataset, make_dgp, sample_dgp
from .training import TrainConfig, TrainTrace, grad_check, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "BalanceConfig", "balanced_objective", "sinkhorn", "sinkhorn_distance",
    "Dataset", "Standardizer",
    "EffectEstimate", "ate", "estimate_effects", "latent_means",
    "AffineFit", "EvalReport", "affine_recovery", "eps_ate", "evaluate", "sqrt_pehe",
    "DiagGaussian", "IntactVAE", "ModelConfig", "NumericError", "elbo", "gaussian_kl", "reparam_sample",
    "DGPSpec", "SynthDataset", "make_dgp", "sample_dgp",
    "TrainConfig", "TrainTrace", "grad_check", "load_checkpoint", "save_checkpoint", "train",
]
