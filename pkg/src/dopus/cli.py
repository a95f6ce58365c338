"""Command-line entry point.

Every command prints one JSON document on stdout. Failures exit non-zero and
print ``{"error": ..., "message": ...}`` on stderr.
"""

from __future__ import annotations

import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import click
import numpy as np

__all__ = ["main", "cli"]


def _emit(obj) -> None:
    click.echo(json.dumps(obj, indent=1, sort_keys=True))


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def cli(verbose: bool):
    """Doppler-aware vessel segmentation and closed-loop re-identification simulator."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)


# -- scan -----------------------------------------------------------------------------

@cli.group()
def scan():
    """Closed-loop scans on the phantom or replayed sequences."""


@scan.command("run")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--no-reident", is_flag=True, help="Run the monitor but never move the probe.")
@click.option("--seed", type=int, default=None, help="Override the scenario seed.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None, help="Override out_dir.")
def scan_run(config_path, no_reident, seed, out_dir):
    from .config import load_config
    from .pipeline import run_scan

    cfg = load_config(config_path).scan
    if no_reident:
        cfg.reident_enabled = False
    if seed is not None:
        cfg.rng_seed = seed
        if cfg.scenario is not None:
            cfg.scenario = replace(cfg.scenario, seed=seed)
    if out_dir is not None:
        cfg.out_dir = out_dir
    report = run_scan(cfg)
    _emit({"out_dir": cfg.out_dir, **report.summary()})


@scan.command("ab")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--trials", type=click.IntRange(min=1), default=None, help="Override [ab] trials.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None)
def scan_ab(config_path, trials, out_dir):
    from .config import load_config
    from .pipeline import ab_compare

    rc = load_config(config_path)
    n = trials if trials is not None else rc.ab_trials
    _emit(ab_compare(rc.scan, n, out_dir=out_dir or rc.scan.out_dir))


# -- training -------------------------------------------------------------------------

@cli.command()
@click.option("--variant", default="dopus4", show_default=True)
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False), help="Checkpoint (.npz).")
@click.option("--resolution", default=64, show_default=True, type=click.IntRange(min=8))
@click.option("--fold", type=int, default=None, help="Hold out the k-th patient for early stopping.")
@click.option("--lr", type=float, default=None, help="Initial learning rate (default 1e-4).")
@click.option("--batch-size", type=click.IntRange(min=1), default=16, show_default=True)
@click.option("--max-epochs", type=click.IntRange(min=1), default=200, show_default=True)
@click.option("--max-iterations", type=click.IntRange(min=1), default=None)
@click.option("--time-budget", type=float, default=None, help="Seconds before training stops.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--no-augment", is_flag=True)
def train(variant, data_dir, out_path, resolution, fold, lr, batch_size, max_epochs, max_iterations,
          time_budget, seed, no_augment):
    """Train one network variant on saved sequences."""
    import torch

    from .segnet import (DopUsNet, TrainConfig, build_sequences, evaluate, get_variant, load_sequence_arrays,
                         save_checkpoint)
    from .segnet import train as run_training

    arrays, _ = load_sequence_arrays(data_dir, resolution)
    patients = sorted(arrays)
    held = []
    if fold is not None:
        if not 0 <= fold < len(patients) or len(patients) < 2:
            raise click.BadParameter(f"fold must lie in [0, {len(patients) - 1}]", param_hint="--fold")
        held = [patients[fold]]
    tr = {p: arrays[p] for p in patients if p not in held}
    cfg = TrainConfig(lr=lr if lr is not None else TrainConfig.lr, batch_size=batch_size, max_epochs=max_epochs,
                      max_iterations=max_iterations, time_budget_s=time_budget, rng_seed=seed,
                      augment=not no_augment)
    seqs = build_sequences(tr, cfg.sequence_length, 10)
    val = build_sequences({p: arrays[p] for p in held}, cfg.sequence_length, cfg.sequence_length) if held else None
    torch.set_num_threads(1)
    torch.manual_seed(seed)
    model = DopUsNet(get_variant(variant))
    res = run_training(model, seqs, cfg, val)
    path = save_checkpoint(model, out_path, resolution,
                           {"train_patients": list(tr), "held_out": held, "seed": seed, "lr": cfg.lr})
    curve = res.write_curve(path.with_suffix(".curve.csv"))
    out = {"checkpoint": str(path), "curve": str(curve), "variant": model.variant.name,
           "epochs": res.epochs, "iterations": res.iterations, "seconds": round(res.seconds, 3)}
    if held:
        out["held_out"] = held
        out["held_out_dice"] = round(evaluate(model, [a for p in held for a in arrays[p]]), 6)
    _emit(out)


@cli.command("eval")
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True, file_okay=False))
def evaluate_cmd(checkpoint, data_dir):
    """Mean per-frame dice of a checkpoint on saved sequences (full-resolution ground truth)."""
    from .compound import dice_score
    from .imaging import iter_sequence_dirs, load_sequence
    from .segnet import frames_arrays, load_checkpoint, predict_sweep

    model, header = load_checkpoint(checkpoint)
    res = header["resolution"]
    rows, all_scores = [], []
    for d in iter_sequence_dirs(data_dir):
        frames, gts, meta = load_sequence(d)
        if gts is None:
            continue
        b, dop, _ = frames_arrays(frames, gts, res)
        prob = predict_sweep(model, b, dop, out_hw=gts[0].shape)
        s = [dice_score(p > 0.5, g.data > 0.5) for p, g in zip(prob, gts)]
        all_scores.extend(s)
        rows.append({"sequence": str(Path(d).relative_to(data_dir)), "dice": round(float(np.mean(s)), 6)})
    if not rows:
        raise FileNotFoundError(f"no labelled sequences under {data_dir}")
    _emit({"checkpoint": str(checkpoint), "variant": header["variant"]["name"],
           "mean_dice": round(float(np.mean(all_scores)), 6), "sequences": rows})


# -- phantom --------------------------------------------------------------------------

@cli.group()
def phantom():
    """Synthetic duplex data."""


@phantom.command("gen")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
def phantom_gen(config_path, out_dir):
    """Write one sequence directory per (patient, sweep)."""
    from .config import load_config
    from .imaging import save_sequence
    from .phantom import iter_dataset

    ds = load_config(config_path).dataset
    out = Path(out_dir)
    written = []
    for p, sweeps in iter_dataset(ds.n_patients, ds.sweeps_per_patient, ds.length_mm, ds.seed, ds.phantom,
                                  dropout_prob=ds.dropout_prob, max_tilt=ds.max_tilt,
                                  dropout_len=tuple(ds.dropout_len)):
        for s, sw in enumerate(sweeps):
            d = save_sequence(out / f"patient_{p:02d}" / f"sweep_{s:02d}", sw.frames, sw.ground_truth, sw.meta)
            written.append(str(d.relative_to(out)))
    _emit({"out_dir": str(out), "sequences": written, "config": asdict(ds)})


def main(argv=None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
    except click.exceptions.Exit as e:
        return e.exit_code
    except click.ClickException as e:
        click.echo(json.dumps({"error": type(e).__name__, "message": e.format_message()}), err=True)
        return e.exit_code
    except click.exceptions.Abort:
        click.echo(json.dumps({"error": "Aborted", "message": "aborted"}), err=True)
        return 1
    except Exception as e:  # noqa: BLE001 - report every failure as JSON
        click.echo(json.dumps({"error": type(e).__name__, "message": str(e)}), err=True)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
