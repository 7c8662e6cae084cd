from .autoencoder import ColorAutoencoder
from .checkpoint import FORMAT_VERSION, Checkpoint, load_checkpoint, save_checkpoint
from .denoiser import STAGE_ORDER, Denoiser
from .model import Colorizer, parameter_hash
from .sampling import colorize
from .schedule import NoiseSchedule, add_noise, ddim_step
from .training import (
    DiffusionTrainer,
    clips_to_tensors,
    load_split,
    prepare_latents,
    train_autoencoder,
    train_stage1,
    train_stage2,
)
