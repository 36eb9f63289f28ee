"""Conditional flow matching: paths, velocity model, training, sampling, alignment."""
from .alignment import (DtwResult, Warp, dtw_align, fit_length, misalign, path_cost, path_rates,
                        resample_frames, warp_along_path)
from .checkpoint import (CheckpointError, load_checkpoint, read_loss_curve, save_checkpoint,
                         write_loss_curve)
from .model import (AdaLN, ConditioningMode, ModelConfig, TokenMixer, VelocityModel,
                    adaln_modulate)
from .paths import interpolate, positional_encoding, target_velocity, timestep_embed
from .training import (Batch, FlowExample, FlowMode, TrainConfig, TrainingDivergedError,
                       TrainResult, cfm_loss, euler_integrate, loss_and_grad, sample,
                       stack_batch, train)
