"""Reusable experiment drivers: phantom datasets, the architecture ablation and the A/B scan."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .phantom import PhantomConfig, iter_dataset
from .pipeline import NetworkSegmenter, PipelineConfig, ScenarioConfig, ab_compare
from .segnet.data import build_sequences, sweep_arrays
from .segnet.model import DopUsNet, get_variant
from .segnet.train import TrainConfig, TrainResult, evaluate, train

log = logging.getLogger(__name__)

__all__ = [
    "ABLATION_VARIANTS",
    "AB_DROPOUT",
    "ExperimentConfig",
    "phantom_arrays",
    "fold_groups",
    "train_fold",
    "run_ablation",
    "run_ab",
]

ABLATION_VARIANTS = ("unet-b", "unet-bd", "dopus4")
# colour flow fades 20 mm into a 150 mm sweep and stays weak at the nominal tilt
AB_DROPOUT = [[20.0, 150.0, 0.15]]


@dataclass(frozen=True)
class ExperimentConfig:
    n_patients: int = 18
    length_mm: float = 100.0
    data_seed: int = 0
    resolution: int = 64
    n_folds: int = 3
    lr: float = 1e-3
    time_budget_s: float = 150.0
    max_epochs: int = 200
    sequence_stride: int = 10
    phantom: PhantomConfig = field(default_factory=PhantomConfig)

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(lr=self.lr, rng_seed=seed, time_budget_s=self.time_budget_s,
                           max_epochs=self.max_epochs)


def phantom_arrays(cfg: ExperimentConfig = ExperimentConfig()) -> dict:
    """Model-resolution (bmode, doppler, gt) stacks per virtual patient."""
    it = iter_dataset(cfg.n_patients, 1, cfg.length_mm, seed=cfg.data_seed, cfg=cfg.phantom)
    return {p: [sweep_arrays(s, cfg.resolution) for s in sweeps] for p, sweeps in it}


def fold_groups(patients, n_folds: int, k: int) -> tuple[list, list]:
    """(train, held-out) patient ids; patient p is held out in fold p mod n_folds."""
    if not 0 <= k < n_folds:
        raise IndexError(f"fold {k} out of range")
    held = [p for p in sorted(patients) if p % n_folds == k]
    rest = [p for p in sorted(patients) if p % n_folds != k]
    if not held or not rest:
        raise ValueError("fold leaves an empty split")
    return rest, held


def train_fold(variant: str, arrays: dict, seed: int, cfg: ExperimentConfig = ExperimentConfig()):
    """Train one variant on fold ``seed % n_folds`` with init seed ``seed``.

    Returns (model, train result, held-out mean per-frame dice).
    """
    tr, held = fold_groups(arrays, cfg.n_folds, seed % cfg.n_folds)
    seqs = build_sequences({p: arrays[p] for p in tr}, 20, cfg.sequence_stride)
    vseq = build_sequences({p: arrays[p] for p in held}, 20, 20)
    torch.set_num_threads(1)
    torch.manual_seed(seed)
    model = DopUsNet(get_variant(variant))
    res: TrainResult = train(model, seqs, cfg.train_config(seed), vseq)
    dice = evaluate(model, [a for p in held for a in arrays[p]])
    log.info("%s seed %d: held-out dice %.4f (%d epochs, %.0f s)", variant, seed, dice, res.epochs, res.seconds)
    return model, res, dice


def run_ablation(arrays: dict, seeds=(0, 1, 2), variants=ABLATION_VARIANTS,
                 cfg: ExperimentConfig = ExperimentConfig(), keep_models: bool = False) -> dict:
    t0 = time.perf_counter()
    out = {"per_seed": {v: [] for v in variants}, "models": {}}
    for s in seeds:
        for v in variants:
            m, _, d = train_fold(v, arrays, s, cfg)
            out["per_seed"][v].append(d)
            if keep_models:
                out["models"][(v, s)] = m
    out["mean"] = {v: float(np.mean(ds)) for v, ds in out["per_seed"].items()}
    out["seconds"] = time.perf_counter() - t0
    return out


def run_ab(model, resolution: int, trials: int = 10, base_seed: int = 100, length_mm: float = 150.0,
           dropout=None, n_decoys: int | None = 2, out_dir=None) -> dict:
    """Paired re-identification on/off scans on held-out virtual patients."""
    sc = ScenarioConfig(seed=base_seed, length_mm=length_mm,
                        dropout=[list(z) for z in (AB_DROPOUT if dropout is None else dropout)],
                        n_decoys=n_decoys)
    cfg = PipelineConfig(scenario=sc, write_outputs=False)
    seg = NetworkSegmenter(model, resolution, model.variant.name)
    return ab_compare(cfg, trials, out_dir=out_dir, segmenter=seg)
