"""Segmentation networks, loss, augmentation, training and a classical fallback."""

from .augment import AugParams, AugRanges, augment_sequence, sample_params
from .checkpoint import load_checkpoint, save_checkpoint
from .classical import classical_segment
from .data import (SequenceSet, build_sequences, downsample_frame, frames_arrays, load_sequence_arrays,
                   sweep_arrays, upsample_prob)
from .loss import soft_dice_loss
from .model import (VARIANTS, ConvGruCell, DopUsNet, DopUsVariant, RecurrentState, convgru_step,
                    count_parameters, get_variant)
from .train import (TrainConfig, TrainResult, evaluate, learning_rate, loocv_split, predict_sweep,
                    run_sequence, tbptt_backward, train)

__all__ = [
    "AugParams", "AugRanges", "augment_sequence", "sample_params",
    "load_checkpoint", "save_checkpoint", "classical_segment",
    "SequenceSet", "build_sequences", "downsample_frame", "frames_arrays", "load_sequence_arrays",
    "sweep_arrays", "upsample_prob",
    "soft_dice_loss", "VARIANTS", "ConvGruCell", "DopUsNet", "DopUsVariant", "RecurrentState",
    "convgru_step", "count_parameters", "get_variant", "TrainConfig", "TrainResult", "evaluate",
    "learning_rate", "loocv_split", "predict_sweep", "run_sequence", "tbptt_backward", "train",
]
