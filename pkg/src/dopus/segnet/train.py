"""Training loop (Adam, step-halving schedule, TBPTT, early stopping) and evaluation."""

from __future__ import annotations

import copy
import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..compound import dice_score
from .augment import AugRanges, augment_sequence
from .data import SequenceSet, upsample_prob
from .loss import soft_dice_loss
from .model import DopUsNet

log = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "TrainResult",
    "learning_rate",
    "loocv_split",
    "run_sequence",
    "tbptt_backward",
    "train",
    "predict_sweep",
    "evaluate",
]


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    lr_halving_every: int = 250
    batch_size: int = 16
    max_epochs: int = 200
    early_stop_patience: int = 15
    tbptt_every: int = 4
    sequence_length: int = 20
    rng_seed: int = 0
    augment: bool = True
    max_iterations: int | None = None
    time_budget_s: float | None = None

    def __post_init__(self):
        for name in ("lr", "lr_halving_every", "batch_size", "max_epochs", "early_stop_patience",
                     "tbptt_every", "sequence_length"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


def learning_rate(cfg: TrainConfig, iteration: int) -> float:
    return cfg.lr * 0.5 ** (iteration // cfg.lr_halving_every)


def loocv_split(groups, k: int):
    """Indices (train, validation) holding out the k-th distinct group."""
    groups = np.asarray(groups)
    ids = np.unique(groups)
    if ids.size < 2:
        raise ValueError("need at least two patient groups")
    if not 0 <= k < ids.size:
        raise IndexError(f"fold {k} out of range for {ids.size} groups")
    val = groups == ids[k]
    return np.flatnonzero(~val), np.flatnonzero(val)


def run_sequence(model: DopUsNet, bmode: torch.Tensor, doppler: torch.Tensor, state=None):
    """Forward over (B, T, 1, H, W) stacks; returns probabilities (B, T, 1, H, W) and final state."""
    b, t, _, h, w = bmode.shape
    if state is None and model.variant.recurrent:
        state = model.initial_state(b, h, w, dtype=bmode.dtype)
    outs = []
    for i in range(t):
        p, state = model(bmode[:, i], doppler[:, i], state)
        outs.append(p)
    return torch.stack(outs, dim=1), state


def tbptt_backward(model: DopUsNet, bmode, doppler, gt, every: int, on_chunk):
    """Truncated BPTT: split time into chunks of ``every`` steps, detaching state between them.

    ``on_chunk(loss)`` is called after each chunk's backward pass (e.g. to step an optimiser).
    Returns the per-chunk losses.
    """
    b, t, _, h, w = bmode.shape
    state = model.initial_state(b, h, w, dtype=bmode.dtype) if model.variant.recurrent else None
    losses = []
    for s in range(0, t, every):
        if state is not None:
            state = state.detach()
        prob, state = run_sequence(model, bmode[:, s:s + every], doppler[:, s:s + every], state)
        loss = soft_dice_loss(prob, gt[:, s:s + every])
        loss.backward()
        on_chunk(loss)
        losses.append(float(loss.detach()))
    return losses


@dataclass
class TrainResult:
    model: DopUsNet
    curve: list = field(default_factory=list)  # (iteration, loss, lr, val_dice)
    best_val_dice: float = float("nan")
    epochs: int = 0
    iterations: int = 0
    seconds: float = 0.0

    def write_curve(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "loss", "lr", "val_dice"])
            for it, loss, lr, vd in self.curve:
                w.writerow([it, f"{loss:.6f}", f"{lr:.3e}", "" if vd is None else f"{vd:.6f}"])
        return path


def _val_dice(model: DopUsNet, val: SequenceSet) -> float:
    model.eval()
    with torch.no_grad():
        b, d, g = val.tensors(np.arange(len(val)))
        prob, _ = run_sequence(model, b, d)
    pm = prob.numpy()[:, :, 0] > 0.5
    gm = g.numpy()[:, :, 0] > 0.5
    model.train()
    return float(np.mean([dice_score(p, q) for p, q in zip(pm.reshape(-1, *pm.shape[2:]),
                                                            gm.reshape(-1, *gm.shape[2:]))]))


def train(model: DopUsNet, train_set: SequenceSet, cfg: TrainConfig,
          val_set: SequenceSet | None = None) -> TrainResult:
    """Adam with step-halving lr; early stopping on validation dice (or train loss without one).

    Deterministic for a given ``cfg.rng_seed`` on CPU.
    """
    if len(train_set) == 0:
        raise ValueError("empty dataset")
    if train_set.bmode.shape[1] != cfg.sequence_length:
        raise ValueError("sequence length of the data does not match the config")
    torch.manual_seed(cfg.rng_seed)
    rng = np.random.default_rng(cfg.rng_seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    res = TrainResult(model)
    best_score, best_state, stale = -np.inf, None, 0
    it = 0
    t_start = time.perf_counter()
    ranges = AugRanges()
    model.train()

    def step(loss):
        nonlocal it
        for g in opt.param_groups:
            g["lr"] = learning_rate(cfg, it)
        opt.step()
        opt.zero_grad(set_to_none=True)
        it += 1

    for epoch in range(cfg.max_epochs):
        order = rng.permutation(len(train_set))
        epoch_losses = []
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            b, d, g = (x.numpy().copy() for x in train_set.tensors(idx))
            if cfg.augment:
                for j in range(len(idx)):
                    b[j, :, 0], d[j, :, 0], g[j, :, 0], _ = augment_sequence(
                        b[j, :, 0], d[j, :, 0], g[j, :, 0], rng, ranges=ranges)
            bt, dt, gt = (torch.from_numpy(x.astype(np.float32)) for x in (b, d, g))
            opt.zero_grad(set_to_none=True)
            losses = tbptt_backward(model, bt, dt, gt, cfg.tbptt_every, step)
            epoch_losses.extend(losses)
            res.curve.append((it, float(np.mean(losses)), learning_rate(cfg, max(it - 1, 0)), None))
            if cfg.max_iterations is not None and it >= cfg.max_iterations:
                break
        score = _val_dice(model, val_set) if val_set is not None else -float(np.mean(epoch_losses))
        if val_set is not None:
            it_, loss_, lr_, _ = res.curve[-1]
            res.curve[-1] = (it_, loss_, lr_, score)
        log.info("epoch %d it %d loss %.4f score %.4f", epoch, it, np.mean(epoch_losses), score)
        res.epochs = epoch + 1
        if score > best_score:
            best_score, best_state, stale = score, copy.deepcopy(model.state_dict()), 0
        else:
            stale += 1
        out_of_time = cfg.time_budget_s is not None and time.perf_counter() - t_start > cfg.time_budget_s
        out_of_iters = cfg.max_iterations is not None and it >= cfg.max_iterations
        if stale >= cfg.early_stop_patience or out_of_time or out_of_iters:
            break
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    res.best_val_dice = float(best_score) if val_set is not None else float("nan")
    res.iterations = it
    res.seconds = time.perf_counter() - t_start
    return res


def predict_sweep(model: DopUsNet, bmode: np.ndarray, doppler: np.ndarray, out_hw=None) -> np.ndarray:
    """Run a whole (T, h, w) sweep with continuous recurrent state; returns probabilities.

    With ``out_hw`` the maps are bilinearly upsampled to that size.
    """
    model.eval()
    with torch.no_grad():
        b = torch.from_numpy(np.asarray(bmode, np.float32))[None, :, None]
        d = torch.from_numpy(np.asarray(doppler, np.float32))[None, :, None]
        prob, _ = run_sequence(model, b, d)
    p = prob.numpy()[0, :, 0]
    if out_hw is not None:
        p = np.stack([upsample_prob(x, *out_hw) for x in p])
    return p


def evaluate(model: DopUsNet, sweeps_arrays, full_res_gt=None) -> float:
    """Mean per-frame dice over sweeps given as (bmode, doppler, gt) model-resolution stacks.

    If ``full_res_gt`` (list of (T, H, W) masks) is given, predictions are upsampled
    and scored against it instead.
    """
    scores = []
    for k, (b, d, g) in enumerate(sweeps_arrays):
        if full_res_gt is not None:
            gt = full_res_gt[k]
            p = predict_sweep(model, b, d, out_hw=gt.shape[1:])
        else:
            gt = g
            p = predict_sweep(model, b, d)
        scores.extend(dice_score(pi > 0.5, gi > 0.5) for pi, gi in zip(p, gt))
    return float(np.mean(scores))
