"""Statistical postprocessing of gridded ensemble weather forecasts.

Two correction methods share one data model: a self-attentive ensemble
transformer trained on CRPS with a small numpy autodiff engine, and the
member-by-member (MBM) regression fitted per gridpoint and lead time.
"""

from .data import ForecastDataset, SyntheticConfig, chronological_split, generate_synthetic, load_eppg, save_eppg
from .estimators import EnsembleTransformer, MemberByMember
from .mbm import MbmFitConfig, MbmParameters, apply_mbm, fit_mbm
from .model import ModelConfig, TrainConfig, forward, load_checkpoint, save_checkpoint, train
from .scoring import crps_fair, crps_gaussian, crps_kernel
from .verification import verify, write_report

__all__ = [
    "ForecastDataset",
    "SyntheticConfig",
    "chronological_split",
    "generate_synthetic",
    "load_eppg",
    "save_eppg",
    "EnsembleTransformer",
    "MemberByMember",
    "MbmFitConfig",
    "MbmParameters",
    "apply_mbm",
    "fit_mbm",
    "ModelConfig",
    "TrainConfig",
    "forward",
    "load_checkpoint",
    "save_checkpoint",
    "train",
    "crps_fair",
    "crps_gaussian",
    "crps_kernel",
    "verify",
    "write_report",
]

__version__ = "0.1.0"
