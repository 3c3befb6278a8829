"""Latent-space diffusion transformer for procedural clip-embedding prediction."""

from .core import ModelConfig, ProcedureSample, validate_sample
from .data import ProcedureDataset, SyntheticConfig, gen_synthetic, read_dataset, write_dataset
from .denoiser import DenoiseConfig, denoise, denoise_k
from .heads import AttentivePooler, HeadConfig
from .model import VEDiT, build_model
from .pipeline import Predictor, TaskSpec, build_predictor, evaluate
from .scheduler import SchedulerConfig, euler_step, forward_interpolate, make_schedule
from .training import TrainConfig, fit, lr_at

__version__ = "0.1.0"
