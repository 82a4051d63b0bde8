"""
The experiment phases behind the command line: gen, pretrain, finetune, eval, inspect

Every phase reads and writes inside the run's output directory:

=========================  ====================================================
source.rffd, target.rffd   packet datasets (gen)
source.mmse, target.mmse   MMSE channel statistics (gen)
pretrain_last.ckpt         full pretraining state, optimiser included
backbone_best.ckpt         backbone of the best-NMI epoch, the fine-tuning start
checkpoints/epoch_*.ckpt   per-epoch backbones, the last NMI-window of them kept
pretrain_report.csv        per-epoch loss, val loss, NMI, lr, seconds
model.ckpt                 fine-tuned (or supervised) backbone + classifier
finetune_report.csv        per-epoch train loss and val accuracy
confusion.csv              confusion matrix of the restored model with totals
snr_sweep.csv              LS / MMSE / hybrid accuracy per evaluation SNR
features.csv               encoder features of the validation packets
metrics.json               deterministic metrics with the config hash
timings.json               wall-clock seconds per phase
=========================  ====================================================
"""
import logging
from pathlib import Path
from typing import Dict, List

import numpy as np
import pandas as pd

from .. import FormatError, StorageError
from ..learning import equalized_views
from ..learning.finetune import (
    FinetuneReport,
    decide,
    finetune,
    predict_batch,
    stratified_split,
    train_supervised,
)
from ..learning.simsiam import feature_estimator, pretrain
from ..signals.chanest import MMSE_MAGIC, Estimator, MmseStatistics, Mode, estimate_mmse_statistics
from ..signals.channel import add_awgn
from ..stats import confusion_frame
from ..stats.metrics import FeatureMatrix, accuracy, clustering_nmi, export_features, per_class_accuracy, write_metrics
from ..tensornet.model import CHECKPOINT_MAGIC, ModelState, load_checkpoint, read_manifest, save_checkpoint
from ..utils import PhaseTimer
from ..utils.io import PathLike, peek_magic, read_json, save_csv, write_json
from .config import RunConfig
from .datasets import DATASET_MAGIC, PacketDataset, generate_dataset, read_dataset, read_dataset_header, write_dataset

logger = logging.getLogger(__name__)

ROLES = {"source": 0, "target": 1}
EVAL_STREAM = 10


class Workspace:
    """File layout of one run directory"""

    def __init__(self, root: PathLike):
        self.root = Path(root)

    def dataset(self, role: str) -> Path:
        return self.root / f"{role}.rffd"

    def statistics(self, role: str) -> Path:
        return self.root / f"{role}.mmse"

    def epoch_checkpoint(self, epoch: int) -> Path:
        return self.root / "checkpoints" / f"epoch_{epoch:03d}.ckpt"

    def __getattr__(self, name: str) -> Path:
        names = {
            "pretrain_last": "pretrain_last.ckpt",
            "backbone_best": "backbone_best.ckpt",
            "pretrain_report": "pretrain_report.csv",
            "pretrain_summary": "pretrain_summary.json",
            "model": "model.ckpt",
            "finetune_report": "finetune_report.csv",
            "finetune_summary": "finetune_summary.json",
            "confusion": "confusion.csv",
            "snr_sweep": "snr_sweep.csv",
            "features": "features.csv",
            "metrics": "metrics.json",
            "timings": "timings.json",
        }
        if name not in names:
            raise AttributeError(name)
        return self.root / names[name]

    def require(self, path: Path, hint: str) -> Path:
        if not path.exists():
            raise StorageError(f"{path} does not exist; run `rffcl {hint}` first")
        return path


def _record_timings(ws: Workspace, timer: PhaseTimer, config_hash: str):
    timings = read_json(ws.timings) if ws.timings.exists() else {}
    timings.update({k: round(v, 3) for k, v in timer.durations.items()})
    timings["config_hash"] = config_hash
    write_json(ws.timings, timings)


def _load_inputs(ws: Workspace, role: str):
    dataset = read_dataset(ws.require(ws.dataset(role), "gen"))
    stats = MmseStatistics.load(ws.require(ws.statistics(role), "gen"))
    return dataset, stats


def run_gen(cfg: RunConfig, progress: bool = False) -> Dict[str, Path]:
    """Write the source and target datasets and their MMSE statistics"""
    ws, timer, outputs = Workspace(cfg.out_dir), PhaseTimer(), {}
    devices = cfg.devices.build()
    workers = 1 if cfg.deterministic else None
    for role, stream in ROLES.items():
        channel = getattr(cfg, f"{role}_channel")
        with timer.phase(f"gen_{role}"):
            dataset = generate_dataset(
                devices,
                channel,
                cfg.dataset.packets_per_device,
                cfg.seed,
                role=role,
                stream=stream,
                max_workers=workers,
                progress=progress,
                config_hash=cfg.hash,
            )
            outputs[f"{role}_dataset"] = write_dataset(dataset, ws.dataset(role))
        with timer.phase(f"mmse_{role}"):
            stats = estimate_mmse_statistics(channel, cfg.dataset.mmse_samples, seed=cfg.seed + stream)
            outputs[f"{role}_statistics"] = stats.save(ws.statistics(role))
    _record_timings(ws, timer, cfg.hash)
    return outputs


def _write_finetune_outputs(ws: Workspace, state: ModelState, report: FinetuneReport, cfg: RunConfig, fraction: float):
    extra = {"config_hash": cfg.hash, "mode": cfg.mode.value, "split_fraction": fraction, "split_seed": cfg.seed}
    save_checkpoint(state, ws.model, extra=extra)
    save_csv(report.to_frame(), ws.finetune_report, comment=f"config_hash={cfg.hash}")
    save_csv(
        confusion_frame(report.confusion, totals=True),
        ws.confusion,
        comment=f"config_hash={cfg.hash}",
        index=True,
        index_label="truth",
    )
    summary = report.summary()
    summary.update({"config_hash": cfg.hash, "mode": cfg.mode.value, "confusion": report.confusion})
    write_json(ws.finetune_summary, _plain(summary))


def _plain(obj):
    if isinstance(obj, np.ndarray):
        return [_plain(v) for v in obj.tolist()]
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    if isinstance(obj, np.generic):
        return _plain(obj.item())
    return obj


def run_pretrain(cfg: RunConfig, progress: bool = False) -> Dict[str, Path]:
    """Contrastive pretraining on the source dataset

    In supervised mode there is no pretraining: a backbone and head are trained with
    cross-entropy on `supervised_fraction` of the target packets instead.
    """
    ws, timer = Workspace(cfg.out_dir), PhaseTimer()
    if cfg.mode is Mode.SUPERVISED:
        target, stats = _load_inputs(ws, "target")
        with timer.phase("pretrain_supervised"):
            state, report = train_supervised(
                target.frames, target.labels, cfg.finetune, stats, cfg.backbone, progress=progress
            )
        _write_finetune_outputs(ws, state, report, cfg, cfg.finetune.supervised_fraction)
        _record_timings(ws, timer, cfg.hash)
        return {"model": ws.model, "finetune_report": ws.finetune_report}

    source, stats = _load_inputs(ws, "source")
    window = cfg.pretrain.nmi_window
    extra = {"config_hash": cfg.hash, "mode": cfg.mode.value}

    def on_epoch(epoch: int, state: ModelState, is_best: bool):
        save_checkpoint(state, ws.epoch_checkpoint(epoch), extra=extra, components=("backbone",))
        stale = ws.epoch_checkpoint(epoch - window)
        if epoch >= window and stale.exists():
            stale.unlink()
        if is_best:
            save_checkpoint(state, ws.backbone_best, extra={**extra, "epoch": epoch}, components=("backbone",))

    with timer.phase(f"pretrain_{cfg.mode.value}"):
        state, report = pretrain(
            source.frames,
            cfg.pretrain,
            stats,
            labels=source.labels,
            arch=cfg.backbone,
            on_epoch=on_epoch,
            progress=progress,
        )
    save_checkpoint(state, ws.pretrain_last, extra=extra)
    save_csv(report.to_frame(), ws.pretrain_report, comment=f"config_hash={cfg.hash}")
    summary = report.summary()
    summary.update({"config_hash": cfg.hash, "mode": cfg.mode.value})
    write_json(ws.pretrain_summary, _plain(summary))
    _record_timings(ws, timer, cfg.hash)
    return {"backbone": ws.backbone_best, "last": ws.pretrain_last, "report": ws.pretrain_report}


def run_finetune(cfg: RunConfig, progress: bool = False) -> Dict[str, Path]:
    """Fine-tune the best-NMI backbone on the target dataset

    In supervised mode the model from `pretrain` is already trained; it is re-evaluated
    on its validation split and the summary rewritten.
    """
    ws, timer = Workspace(cfg.out_dir), PhaseTimer()
    target, stats = _load_inputs(ws, "target")
    if cfg.mode is Mode.SUPERVISED:
        state = load_checkpoint(ws.require(ws.model, "pretrain --mode supervised"))
        fraction = cfg.finetune.supervised_fraction
        _, val_idx = stratified_split(target.labels, fraction, cfg.seed)
        with timer.phase("finetune_supervised_eval"):
            probs = _validation_probabilities(state, target.frames, val_idx, stats, cfg)
        labels = target.labels[val_idx]
        summary = {
            "config_hash": cfg.hash,
            "mode": cfg.mode.value,
            "n_validation": len(val_idx),
            "final_accuracy": accuracy(decide(probs["hybrid"]), labels),
            "branch_accuracy": {k: accuracy(decide(p), labels) for k, p in probs.items()},
        }
        write_json(ws.finetune_summary, _plain(summary))
        _record_timings(ws, timer, cfg.hash)
        return {"model": ws.model, "summary": ws.finetune_summary}

    state = load_checkpoint(ws.require(ws.backbone_best, "pretrain"))
    with timer.phase(f"finetune_{cfg.mode.value}"):
        state, report = finetune(state, target.frames, target.labels, cfg.finetune, stats, progress=progress)
    _write_finetune_outputs(ws, state, report, cfg, cfg.finetune.label_fraction)
    _record_timings(ws, timer, cfg.hash)
    return {"model": ws.model, "finetune_report": ws.finetune_report, "confusion": ws.confusion}


def _validation_probabilities(state: ModelState, frames, val_idx, stats, cfg: RunConfig):
    workers = 1 if cfg.deterministic else None
    x_ls = equalized_views(frames, val_idx, stats, Estimator.LS, workers)
    x_mmse = equalized_views(frames, val_idx, stats, Estimator.MMSE, workers)
    return predict_batch(state, x_ls, x_mmse, cfg.eval.batch_size)


def snr_sweep(state: ModelState, dataset: PacketDataset, val_idx, stats, cfg: RunConfig) -> pd.DataFrame:
    """Accuracy of each branch after re-noising the validation packets to each SNR

    Packets already noisier than a grid point are left as they are, so grid points at or
    above the dataset's base SNR reproduce the fine-tuning validation.
    """
    labels = dataset.labels[val_idx]
    rows: List[Dict] = []
    for g, snr in enumerate(cfg.eval.snr_grid_db):
        noisy = list(dataset.frames)
        for i in val_idx:
            noisy[i] = add_awgn(dataset.frames[i], snr, [cfg.seed, EVAL_STREAM, g, int(i)])
        probs = _validation_probabilities(state, noisy, val_idx, stats, cfg)
        row = {"snr_db": snr}
        row.update({f"{name}_accuracy": accuracy(decide(p), labels) for name, p in probs.items()})
        rows.append(row)
        logger.info(f"{snr:g} dB: hybrid accuracy {row['hybrid_accuracy']:.4f}")
    return pd.DataFrame(rows)


def run_eval(cfg: RunConfig, progress: bool = False) -> Dict[str, Path]:
    """SNR sweep, clustering NMI and feature export for the trained model"""
    ws, timer = Workspace(cfg.out_dir), PhaseTimer()
    manifest, _ = read_manifest(ws.require(ws.model, "finetune"))
    state = load_checkpoint(ws.model)
    target, stats = _load_inputs(ws, "target")
    split = manifest["extra"]
    _, val_idx = stratified_split(target.labels, split["split_fraction"], split["split_seed"])
    labels = target.labels[val_idx]

    with timer.phase("eval"):
        probs = _validation_probabilities(state, target.frames, val_idx, stats, cfg)
        predictions = decide(probs["hybrid"])
        sweep = snr_sweep(state, target, val_idx, stats, cfg)
        workers = 1 if cfg.deterministic else None
        x_features = equalized_views(target.frames, val_idx, stats, feature_estimator(cfg.mode), workers)
        features = FeatureMatrix(state.encode(x_features, cfg.eval.batch_size), labels)
        nmi = clustering_nmi(features, target.n_classes, cfg.pretrain.nmi_restarts, cfg.seed)

    save_csv(sweep, ws.snr_sweep, comment=f"config_hash={cfg.hash}")
    outputs = {"metrics": ws.metrics, "snr_sweep": ws.snr_sweep}
    if cfg.eval.export_features:
        outputs["features"] = export_features(features, ws.features, comment=f"config_hash={cfg.hash}")

    metrics = {
        "mode": cfg.mode.value,
        "nmi": nmi,
        "accuracy": accuracy(predictions, labels),
        "branch_accuracy": {name: accuracy(decide(p), labels) for name, p in probs.items()},
        "per_class_accuracy": per_class_accuracy(predictions, labels, target.n_classes),
        "snr_sweep": sweep.to_dict(orient="records"),
        "n_validation": len(val_idx),
    }
    if ws.pretrain_summary.exists():
        pretrained = read_json(ws.pretrain_summary)
        metrics["pretrain_average_nmi"] = pretrained.get("average_nmi")
        metrics["pretrain_best_nmi"] = pretrained.get("best_nmi")
    write_metrics(ws.metrics, metrics, cfg.hash)
    _record_timings(ws, timer, cfg.hash)
    return outputs


def inspect_path(path: PathLike) -> str:
    """Readable summary of a dataset, MMSE statistics or checkpoint file"""
    path = Path(path)
    magic = peek_magic(path)
    lines = [f"{path}"]
    if magic == DATASET_MAGIC:
        dataset = read_dataset(path)
        header, _ = read_dataset_header(path)
        lines.append(f"  dataset ({header['role']}), version {header['version']}, created {header['created']}")
        lines.append(f"  packets: {len(dataset)}, packets per device: {header['packets_per_device']}")
        lines.append(f"  devices: {len(dataset.devices)}, per-device counts: {dataset.counts()}")
        lines.append(f"  frame shape: ({1 + dataset.frames[0].data_rx.shape[0]}, {dataset.frames[0].pilot_rx.shape[0]})")
        lines.append(f"  channel: {header['channel']}")
        lines.append(f"  seed: {header['seed']}, config hash: {header['config_hash']}")
    elif magic == MMSE_MAGIC:
        stats = MmseStatistics.load(path)
        lines.append(f"  MMSE statistics: {stats.r_hh.shape[0]}x{stats.r_hh.shape[1]}, {stats.sample_count} samples")
        lines.append(f"  channel: {stats.channel_config}, seed: {stats.seed}")
    elif magic == CHECKPOINT_MAGIC:
        manifest, _ = read_manifest(path)
        state = load_checkpoint(path)
        lines.append(f"  checkpoint, epoch {manifest['epoch']}, components: {', '.join(manifest['components'])}")
        lines.append(f"  architecture: {manifest['architecture']}")
        for name in manifest["components"]:
            lines.append(f"  {name}: {state.parameter_count(name)} parameters")
        lines.append(f"  backbone footprint: {state.parameter_bytes('backbone') / 1e6:.3f} MB")
        lines.append(f"  extra: {manifest['extra']}")
    else:
        raise FormatError(f"{path}: unrecognised file (magic {magic!r})")
    return "\n".join(lines)
