"""Training loop, evaluation and exports shared by the command line."""

from __future__ import annotations

import csv
import io
import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import plotting
from .config import RunConfig, model_config_from_dict, model_config_to_dict
from .data import DataError, Dataset, augment_batch, generate_dataset, load_dataset, split, write_manifest
from .gal import mask_filename, write_pgm
from .gcl import export_affinity
from .heads import LossReport, total_loss
from .metrics import EvalReport, MetricCounters, accumulate, finalize
from .model import MGGNet, ModelConfig
from .params import SGD, CheckpointMismatch, apply_checkpoint, load_checkpoint, save_checkpoint
from .tensor import NumericError, Tape, backward, no_grad

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, label: str, epoch: int) -> None:
        super().__init__(f"non-finite value in {label} during epoch {epoch}")
        self.label = label
        self.epoch = epoch


def atomic_write_text(path: os.PathLike, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


@dataclass
class TrainResult:
    out_dir: Path
    model: MGGNet
    epoch_reports: list[LossReport]
    val_report: Optional[EvalReport]
    splits: tuple[Dataset, Dataset, Dataset]


def prepare_data(cfg: RunConfig, out_dir: Path) -> tuple[Path, Dataset]:
    if cfg.data.manifest is not None:
        manifest = Path(cfg.data.manifest)
    else:
        spec = cfg.data.synthetic_spec()
        target = Path(cfg.data.generate.get("dir") or out_dir / "data")
        manifest = target / "manifest.csv"
        if not manifest.is_file():
            manifest = generate_dataset(spec, int(cfg.data.generate["count"]), target)
    return manifest, load_dataset(manifest, channels=cfg.model.backbone.input_shape[0])


def _check_data(model_cfg: ModelConfig, ds: Dataset) -> None:
    if ds.labels.shape[1] != model_cfg.N:
        raise DataError(f"data has {ds.labels.shape[1]} label bits, model expects N = {model_cfg.N}")
    if tuple(ds.images.shape[1:]) != tuple(model_cfg.backbone.input_shape):
        raise DataError(f"images are {ds.images.shape[1:]}, backbone expects {model_cfg.backbone.input_shape}")


def _epoch_report(sums: np.ndarray, labels: list[str], batches: int) -> LossReport:
    values = sums / batches
    terms = [(lab, float(v)) for lab, v in zip(labels, values)]
    total = 0.0
    for _, v in terms:
        total += v
    return LossReport(terms, total)


def train(cfg: RunConfig, out_dir: Optional[os.PathLike] = None) -> TrainResult:
    """Train per ``cfg``; write logs, checkpoint and validation report under ``out_dir``."""
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest, ds = prepare_data(cfg, out)
    _check_data(cfg.model, ds)
    train_ds, val_ds, test_ds = split(ds, cfg.data.split, cfg.data.split_seed)
    if len(train_ds) < 2:
        raise DataError("training split needs at least 2 samples")

    splits_dir = out / "splits"
    splits_dir.mkdir(exist_ok=True)
    for part in (train_ds, val_ds, test_ds):
        if len(part):
            write_manifest(splits_dir / f"{part.split_tag}_manifest.csv", part, manifest.parent)
    resolved = dict(cfg.raw)
    resolved["model"] = model_config_to_dict(cfg.model)
    atomic_write_text(out / "config.json", json.dumps(resolved, indent=2, sort_keys=True) + "\n")

    tc = cfg.training
    model = MGGNet(cfg.model, seed=tc.seed)
    opt = SGD(model.store, tc.schedule[0][1], tc.momentum)
    rng = np.random.default_rng([tc.seed, 1])
    logs = out / "logs"
    logs.mkdir(exist_ok=True)
    reports: list[LossReport] = []
    summary = ["epoch,lr,batches,total"]
    n = len(train_ds)
    for epoch in range(tc.epochs):
        lr = tc.lr_at(epoch)
        perm = rng.permutation(n)
        sums: Optional[np.ndarray] = None
        labels: list[str] = []
        batches = 0
        for s in range(0, n, tc.batch_size):
            idx = np.sort(perm[s : s + tc.batch_size])
            if len(idx) < 2:  # batchnorm needs two samples
                continue
            x = train_ds.images[idx]
            if tc.augment:
                x = augment_batch(x, tc.flip_p, rng)
            y = train_ds.labels[idx]
            try:
                with Tape():
                    result = model.forward(x, mode="train")
                    loss, rep = total_loss(result.preds, y, cfg.model.blocks, tc.mode)
                    backward(loss)
            except NumericError as exc:
                raise TrainingDiverged(str(exc), epoch + 1) from exc
            values = np.array([v for _, v in rep.terms])
            if not np.isfinite(values).all():
                bad = rep.terms[int(np.flatnonzero(~np.isfinite(values))[0])][0]
                raise TrainingDiverged(bad, epoch + 1)
            opt.step(lr)
            for name, p in model.store.items():
                if not np.isfinite(p.data).all():
                    raise TrainingDiverged(f"parameter {name} after the update", epoch + 1)
            if sums is None:
                sums, labels = values.copy(), [lab for lab, _ in rep.terms]
            else:
                sums += values
            batches += 1
        report = _epoch_report(sums, labels, batches)
        reports.append(report)
        atomic_write_text(logs / f"epoch_{epoch + 1:03d}.csv", report.to_csv())
        summary.append(f"{epoch + 1},{lr!r},{batches},{report.total!r}")
        log.info("epoch %d lr %g loss %.6f", epoch + 1, lr, report.total)
    atomic_write_text(out / "train_log.csv", "\n".join(summary) + "\n")

    save_checkpoint(model.store, out / "checkpoint", {"model": model_config_to_dict(cfg.model)})
    val_report = None
    if len(val_ds):
        val_report = evaluate_model(model, val_ds, tc.threshold)
        atomic_write_text(out / "eval_val.csv", val_report.to_csv())
    if cfg.figures and reports:
        fig_dir = out / "figures"
        fig_dir.mkdir(exist_ok=True)
        plotting.loss_curve(
            list(range(1, len(reports) + 1)), [r.total for r in reports], [tc.lr_at(e) for e in range(len(reports))],
            fig_dir / "loss_curve.png",
        )
        if val_report is not None:
            plotting.accuracy_bars(val_report.pred_acc, val_report.bal_acc, list(cfg.model.assignment.catalog.names), fig_dir / "eval_val.png")
    return TrainResult(out, model, reports, val_report, (train_ds, val_ds, test_ds))


def evaluate_model(model: MGGNet, ds: Dataset, threshold: float = 0.5, batch_size: int = 64) -> EvalReport:
    counters = MetricCounters.zeros(model.config.N)
    with no_grad():
        for s in range(0, len(ds), batch_size):
            probs = model.forward(ds.images[s : s + batch_size], mode="eval").preds.final().data
            counters = accumulate(counters, probs, ds.labels[s : s + batch_size], threshold)
    return finalize(counters, threshold, list(model.config.assignment.catalog.names))


def load_model(checkpoint: os.PathLike, expected: Optional[ModelConfig] = None) -> MGGNet:
    """Rebuild a model from a checkpoint directory.

    Raises :class:`CheckpointMismatch` when ``expected`` disagrees with the
    architecture stored in the checkpoint.
    """
    try:
        arrays, manifest = load_checkpoint(checkpoint)
    except FileNotFoundError as exc:
        raise DataError(f"checkpoint {checkpoint} not found") from exc
    stored = model_config_from_dict(manifest["model"]) if "model" in manifest else None
    if expected is not None and stored is not None:
        want, have = model_config_to_dict(expected), model_config_to_dict(stored)
        diff = sorted(k for k in want if want[k] != have.get(k))
        if diff:
            raise CheckpointMismatch(f"checkpoint model disagrees with config in {', '.join(diff)}")
    cfg = expected or stored
    if cfg is None:
        raise CheckpointMismatch("checkpoint carries no model config and none was given")
    model = MGGNet(cfg, seed=manifest.get("seed", 0))
    apply_checkpoint(model.store, arrays)
    return model


def export_attention(
    model: MGGNet, ds: Dataset, sample_ids: Sequence[str], out_dir: os.PathLike, figures: bool = True
) -> list[Path]:
    if model.config.variant != "full":
        raise ValueError("attention masks exist only for the full model")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    idx = [ds.index_of(s) for s in sample_ids]
    written = []
    with no_grad():
        res = model.forward(ds.images[idx], mode="eval")
    for row, sid in enumerate(sample_ids):
        per_sample = {}
        for (b, i), m in res.masks.items():
            arr = m.data[row, 0]
            per_sample[(b, i)] = arr
            path = out / mask_filename(b, i, sid)
            tmp = path.with_name(path.name + ".tmp")
            write_pgm(tmp, arr)
            os.replace(tmp, path)
            written.append(path)
        if figures:
            plotting.attention_grid(ds.images[idx[row], 0], per_sample, model.config.assignment.names, out / f"attention_s{sid}.png")
    return written


def export_affinities(model: MGGNet, ds: Dataset, out_dir: os.PathLike, figures: bool = True, batch_size: int = 64) -> list[Path]:
    if model.config.variant != "full":
        raise ValueError("affinity matrices exist only for the full model")
    if len(ds) == 0:
        raise DataError("cannot export affinities over an empty evaluation set")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    per_block: dict[int, list[np.ndarray]] = {b: [] for b in model.config.blocks}
    with no_grad():
        for s in range(0, len(ds), batch_size):
            res = model.forward(ds.images[s : s + batch_size], mode="eval")
            for b, aff in res.affinities.items():
                per_block[b].append(aff.data)
    names = model.config.assignment.names
    written = []
    for b, batches in per_block.items():
        path = out / f"affinity_b{b}.csv"
        scaled = export_affinity(batches, names, path)
        written.append(path)
        if figures:
            plotting.affinity_heatmap(scaled, names, out / f"affinity_b{b}.png", title=f"block {b}")
    return written


def read_loss_csv(path: os.PathLike) -> list[tuple[str, float]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return [(r[0], float(r[1])) for r in rows[1:]]


def report_table(report: EvalReport) -> str:
    buf = io.StringIO()
    buf.write(f"mean prediction accuracy {report.mean_prediction:.4f}\n")
    buf.write(f"mean balanced accuracy   {report.mean_balanced:.4f}\n")
    return buf.getvalue()
