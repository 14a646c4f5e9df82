"""Command-line interface: generate | train | track | eval | compare | plot.

Every failure prints one line ``error: <kind>: <message>`` on stderr and exits
nonzero. ``TBDQ_LOG_LEVEL`` sets logging verbosity.
"""

from __future__ import annotations

import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional

import click
import numpy as np
import torch
import yaml

from . import io as tio
from .associator.model import Associator, FingerprintMismatch, load_checkpoint
from .baseline import IoUTracker
from .detsim import generate_sequence, observe_sequence
from .metrics import MetricsReport, combine, evaluate, format_table
from .tracker import TBDQTracker
from .training.loop import TrainingSample, train as train_model

log = logging.getLogger("tbdq")

EXIT_USAGE = 2
EXIT_FAILURE = 1


def _setup_logging() -> None:
    level = os.environ.get("TBDQ_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def _resolved(config: Optional[str], seed: int) -> tio.RunConfig:
    cfg = tio.load_config(config)
    cfg.seed = seed
    cfg.train = replace(cfg.train, seed=seed)
    return cfg


def _seq_name(i: int) -> str:
    return f"seq-{i:04d}"


@click.group()
def cli() -> None:
    """Tracking by detection and query on synthetic scenes."""


@cli.command()
@click.option("--config", type=click.Path(dir_okay=False), default=None, help="YAML run config.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(file_okay=False), required=True)
@click.option("--n-sequences", type=int, default=None, help="Overrides the config value.")
def generate(config, seed, out, n_sequences):
    """Simulate sequences and oracle detections into OUT/seq-XXXX/."""
    cfg = _resolved(config, seed)
    if n_sequences is not None:
        cfg.n_sequences = n_sequences
    if cfg.n_sequences < 1:
        raise ValueError("n_sequences must be >= 1")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    detector = cfg.make_detector()
    seeds = np.random.default_rng(seed).integers(0, 2**31 - 1, size=cfg.n_sequences)
    for i, s in enumerate(seeds):
        seq = generate_sequence(cfg.scene, int(s))
        obs = observe_sequence(seq, cfg.noise, int(s), detector)
        tio.save_sequence(out / _seq_name(i), seq, obs)
    cfg.paths = {"data": str(out)}
    tio.save_config(cfg, out / "config.yaml")
    click.echo(f"wrote {cfg.n_sequences} sequences to {out}")


def _load_dataset(data) -> list[tuple[Path, object, list]]:
    return [(d, *tio.load_sequence(d)) for d in tio.sequence_dirs(data)]


@cli.command()
@click.option("--config", type=click.Path(dir_okay=False), default=None)
@click.option("--data", type=click.Path(), required=True, help="Directory written by 'generate'.")
@click.option("--out", type=click.Path(file_okay=False), required=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--epochs", type=int, default=None, help="Overrides the config value.")
def train(config, data, out, seed, epochs):
    """Train the associator; writes checkpoint.pt, loss_curve.csv and config.yaml."""
    cfg = _resolved(config, seed)
    if epochs is not None:
        cfg.train = replace(cfg.train, epochs=epochs)
    torch.manual_seed(seed)
    dataset = [TrainingSample(seq, obs) for _, seq, obs in _load_dataset(data)]
    model = Associator(cfg.associator)
    out = Path(out)
    result = train_model(model, dataset, cfg.train, cfg.make_detector(), cfg.noise, out_dir=out)
    cfg.paths = {"data": str(data), "checkpoint": str(out / "checkpoint.pt")}
    tio.save_config(cfg, out / "config.yaml")
    losses = result.epoch_losses
    click.echo(f"trained {len(losses)} epochs, final loss {losses[-1]:.4f}" if losses else "trained 0 epochs")


@cli.command()
@click.option("--checkpoint", type=click.Path(dir_okay=False), default=None)
@click.option("--baseline", is_flag=True, help="Use the IoU baseline instead of a checkpoint.")
@click.option("--config", type=click.Path(dir_okay=False), default=None, help="Lifecycle/baseline settings; its associator config must match the checkpoint.")
@click.option("--data", type=click.Path(), required=True)
@click.option("--out", type=click.Path(file_okay=False), required=True)
@click.option("--seed", type=int, default=0, show_default=True)
def track(checkpoint, baseline, config, data, out, seed):
    """Run a tracker over every sequence; writes OUT/<sequence>.txt in MOT format."""
    if baseline == (checkpoint is not None):
        raise click.UsageError("give exactly one of --checkpoint or --baseline")
    cfg = _resolved(config, seed)
    torch.manual_seed(seed)
    model = None
    if checkpoint is not None:
        if not Path(checkpoint).exists():
            raise FileNotFoundError(f"no such checkpoint: {checkpoint}")
        model, _ = load_checkpoint(checkpoint, expected=cfg.associator if config else None)
        cfg.associator = model.cfg
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    for d, seq, obs in _load_dataset(data):
        if model is not None:
            records = TBDQTracker(model, cfg.lifecycle).run(obs)
        else:
            tracker = IoUTracker(cfg.baseline)
            records = [r for o in obs for r in tracker.step(o)]
        rows = tio.records_to_mot(records, seq.config.img_width, seq.config.img_height)
        tio.write_mot(rows, out / f"{d.name}.txt")
    cfg.paths = {"data": str(data), "results": str(out), "checkpoint": str(checkpoint or "")}
    tio.save_config(cfg, out / "config.yaml")
    click.echo(f"wrote results to {out}")


def _pairs(gt, results) -> list[tuple[str, Path, Path]]:
    gt, results = Path(gt), Path(results)
    if gt.is_file():
        if not results.is_file():
            raise FileNotFoundError(f"no such results file: {results}")
        return [(gt.stem, gt, results)]
    pairs = []
    for d in tio.sequence_dirs(gt):
        res = results / f"{d.name}.txt"
        if not res.exists():
            raise FileNotFoundError(f"no results for {d.name}: {res}")
        pairs.append((d.name, d / tio.GT_FILE, res))
    return pairs


def _evaluate(gt, results) -> MetricsReport:
    reports = [
        evaluate(tio.mot_to_sequence(tio.read_mot(g)), tio.mot_to_sequence(tio.read_mot(r)))
        for _, g, r in _pairs(gt, results)
    ]
    return combine(reports)


def _write_csv(rows: dict[str, MetricsReport], path) -> None:
    cols = MetricsReport.SUMMARY_FIELDS
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("tracker," + ",".join(cols) + "\n")
        for name, rep in rows.items():
            fh.write(name + "," + ",".join(str(getattr(rep, c)) for c in cols) + "\n")


@cli.command(name="eval")
@click.option("--gt", type=click.Path(), required=True, help="gt.txt or a directory of sequences.")
@click.option("--results", type=click.Path(), required=True, help="Results file or directory.")
@click.option("--csv", "csv_path", type=click.Path(dir_okay=False), default=None)
@click.option("--seed", type=int, default=0, show_default=True)
def eval_cmd(gt, results, csv_path, seed):
    """HOTA, CLEAR and identity metrics summed over sequences."""
    rows = {Path(results).stem or "results": _evaluate(gt, results)}
    click.echo(format_table(rows))
    if csv_path:
        _write_csv(rows, csv_path)


@cli.command()
@click.option("--gt", type=click.Path(), required=True)
@click.option("--a", "res_a", type=click.Path(), required=True)
@click.option("--b", "res_b", type=click.Path(), required=True)
@click.option("--names", nargs=2, default=("A", "B"), show_default=True)
@click.option("--csv", "csv_path", type=click.Path(dir_okay=False), default=None)
@click.option("--seed", type=int, default=0, show_default=True)
def compare(gt, res_a, res_b, names, csv_path, seed):
    """Side-by-side metrics for two result sets on the same ground truth."""
    rows = {names[0]: _evaluate(gt, res_a), names[1]: _evaluate(gt, res_b)}
    click.echo(format_table(rows))
    if csv_path:
        _write_csv(rows, csv_path)


@cli.command()
@click.option("--results", type=click.Path(), required=True)
@click.option("--gt", type=click.Path(), required=True, help="Directory of sequences.")
@click.option("--out", type=click.Path(file_okay=False), required=True)
@click.option("--checkpoint", type=click.Path(dir_okay=False), default=None, help="Also draw BII attention heatmaps.")
@click.option("--max-frames", type=int, default=10, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
def plot(results, gt, out, checkpoint, max_frames, seed):
    """Per-frame overlays (and attention heatmaps with --checkpoint) as PNG."""
    from .plot import plot_attention, plot_overlays

    model = None
    if checkpoint is not None:
        if not Path(checkpoint).exists():
            raise FileNotFoundError(f"no such checkpoint: {checkpoint}")
        model, _ = load_checkpoint(checkpoint)
    out = Path(out)
    n = 0
    for name, g, r in _pairs(gt, results):
        seq_dir = Path(g).parent
        scene = tio.load_sequence(seq_dir)[0].config if (seq_dir / tio.SIDECAR_FILE).exists() else None
        width, height = (scene.img_width, scene.img_height) if scene else (1920, 1080)
        gt_seq = tio.mot_to_sequence(tio.read_mot(g))
        res_seq = tio.mot_to_sequence(tio.read_mot(r))
        frames = sorted(set(gt_seq) | set(res_seq))[:max_frames]
        n += len(plot_overlays(res_seq, gt_seq, out / name, width, height, frames))
        if model is not None:
            _, obs = tio.load_sequence(seq_dir)
            tracker = TBDQTracker(model, record_attention=True)
            tracker.run(obs[: max_frames])
            n += len(plot_attention(tracker.attention, out / name / "attention"))
    click.echo(f"wrote {n} images to {out}")


def _one_line(msg: object) -> str:
    return " ".join(str(msg).split())


def main(argv: Optional[list[str]] = None) -> int:
    """Run the CLI and return the exit code instead of exiting."""
    _setup_logging()
    try:
        cli.main(args=argv, prog_name="tbdq", standalone_mode=False)
        return 0
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.exceptions.Abort:
        kind, msg, code = "aborted", "interrupted", EXIT_FAILURE
    except click.UsageError as exc:
        kind, msg, code = "usage", exc.format_message(), EXIT_USAGE
    except click.ClickException as exc:
        kind, msg, code = "usage", exc.format_message(), EXIT_USAGE
    except FileNotFoundError as exc:
        kind, msg, code = "missing-file", exc, EXIT_FAILURE
    except FingerprintMismatch as exc:
        kind, msg, code = "fingerprint-mismatch", exc, EXIT_FAILURE
    except tio.MotFormatError as exc:
        kind, msg, code = "bad-mot-file", exc, EXIT_FAILURE
    except (ValueError, TypeError, yaml.YAMLError) as exc:
        kind, msg, code = "invalid-input", exc, EXIT_FAILURE
    except Exception as exc:  # last resort, still one line
        log.debug("unhandled error", exc_info=True)
        kind, msg, code = "internal", f"{type(exc).__name__}: {exc}", EXIT_FAILURE
    click.echo(f"error: {kind}: {_one_line(msg)}", err=True)
    return code


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
