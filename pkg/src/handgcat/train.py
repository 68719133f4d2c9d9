"""Training, evaluation and ablation loops."""
from __future__ import annotations

import csv
import itertools
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from .config import RunConfig, dump_config, parse_config
from .kgc import add_pose_noise
from .metrics import MetricsReport, summarize
from .model import HandGCAT, compute_training_loss, render_heatmaps
from .optim import Adam, step_decay_lr
from .synth import SyntheticDataset, generate_dataset
from .tensor import NonFiniteError, no_grad, precision

log = logging.getLogger(__name__)

OCCLUSION_BINS = ((0.0, 0.25), (0.25, 0.5), (0.5, 1.0))


class TrainingDiverged(RuntimeError):
    """Loss or parameters became non-finite."""


def make_datasets(cfg: RunConfig) -> tuple[SyntheticDataset, SyntheticDataset]:
    train = generate_dataset(cfg.seed, cfg.data.n_train, cfg.data.occlusion_level, "train",
                             hand_seed=cfg.data.hand_seed)
    test = generate_dataset(cfg.seed, cfg.data.n_test, cfg.data.test_occlusion_level, "test",
                            hand_seed=cfg.data.hand_seed)
    return train, test


def build_model(cfg: RunConfig) -> HandGCAT:
    cfg.validate()
    with precision(cfg.precision):
        return HandGCAT(cfg.model_config(), np.random.default_rng([cfg.seed, 7]))


def batch_targets(batch: dict, heatmap_channels: int) -> dict:
    """Loss targets in the hand frame (camera translation removed)."""
    shift = batch["transl"][:, None, :]
    return {
        "heatmaps": render_heatmaps(batch["pose2d"], heatmap_channels),
        "theta": batch["theta"], "beta": batch["beta"],
        "joints": batch["joints3d"] - shift, "verts": batch["mesh"] - shift,
    }


def _first_bad_param(model) -> str | None:
    for name, p in model.named_parameters():
        if not np.all(np.isfinite(p.data)):
            return name
    return None


@dataclass
class TrainResult:
    model: HandGCAT
    step_losses: list = field(default_factory=list)
    epoch_rows: list = field(default_factory=list)
    checkpoint: Path | None = None


def train(cfg: RunConfig, train_set: SyntheticDataset | None = None, out_dir=None,
          test_set: SyntheticDataset | None = None) -> TrainResult:
    """Deterministic given ``cfg.seed``. Writes ``train_log.csv`` and checkpoints
    under ``out_dir`` when given."""
    cfg.validate()
    if train_set is None:
        train_set, generated_test = make_datasets(cfg)
        test_set = test_set or generated_test
    if len(train_set) == 0:
        raise ValueError("empty training set")
    out_dir = Path(out_dir) if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    model = build_model(cfg)
    opt = Adam(model.parameters(), lr=cfg.optimizer.lr)
    weights = cfg.loss_weights()
    dtype = np.float64 if cfg.precision == "float64" else np.float32
    n = len(train_set)
    bs = min(cfg.optimizer.batch, n)
    result = TrainResult(model)
    step = 0
    max_steps = cfg.optimizer.max_steps or None
    writer = None
    log_fh = open(out_dir / "train_log.csv", "w", newline="") if out_dir else None
    try:
        with precision(cfg.precision):
            for epoch in range(cfg.optimizer.epochs):
                opt.lr = step_decay_lr(cfg.optimizer.lr, epoch, cfg.optimizer.decay_factor,
                                       cfg.optimizer.decay_every)
                rng = np.random.default_rng([cfg.seed, 1, epoch])
                order = rng.permutation(n)
                sums: dict[str, float] = {}
                count = 0
                t0 = time.perf_counter()
                for start in range(0, n - bs + 1, bs):
                    idx = order[start:start + bs]
                    batch = train_set.batch(idx)
                    pose = add_pose_noise(batch["pose2d"], cfg.kgc.noise_sigma, rng)
                    opt.zero_grad()
                    try:
                        pred = model(batch["image"].astype(dtype) / 255.0, pose)
                        loss, parts = compute_training_loss(
                            pred, batch_targets(batch, model.cfg.heatmap_channels), weights)
                        value = loss.item()
                    except NonFiniteError as exc:   # raised early when checked mode is on
                        value, parts = float("nan"), {"error": str(exc)}
                    if not np.isfinite(value):
                        bad = _first_bad_param(model)
                        raise TrainingDiverged(
                            f"non-finite loss {value} at epoch {epoch} step {step}"
                            + (f"; first non-finite parameter: {bad}" if bad else "")
                            + f"; terms: {parts}")
                    loss.backward()
                    opt.step()
                    result.step_losses.append(value)
                    for k, v in parts.items():
                        sums[k] = sums.get(k, 0.0) + v
                    sums["total"] = sums.get("total", 0.0) + value
                    count += 1
                    step += 1
                    if max_steps and step >= max_steps:
                        break
                row = {"epoch": epoch, "step": step, "lr": opt.lr,
                       **{f"loss_{k}": v / max(count, 1) for k, v in sums.items()},
                       "seconds": round(time.perf_counter() - t0, 3)}
                if test_set is not None and out_dir:
                    rep, _ = evaluate_model(model, test_set, cfg)
                    row |= {"test_mpjpe_mm": rep.mpjpe_mm, "test_pa_mpjpe_mm": rep.pa_mpjpe_mm}
                result.epoch_rows.append(row)
                log.info("epoch %d: %s", epoch, row)
                if log_fh:
                    if writer is None:
                        writer = csv.DictWriter(log_fh, fieldnames=list(row))
                        writer.writeheader()
                    writer.writerow(row)
                    log_fh.flush()
                every = cfg.optimizer.checkpoint_every
                if out_dir and every and (epoch + 1) % every == 0:
                    save_checkpoint(model, cfg, out_dir / f"checkpoint_epoch{epoch + 1:03d}",
                                    {"epoch": epoch + 1, "step": step})
                if max_steps and step >= max_steps:
                    break
    finally:
        if log_fh:
            log_fh.close()
    if out_dir:
        result.checkpoint = save_checkpoint(model, cfg, out_dir / "checkpoint", {"step": step})
    return result


def save_checkpoint(model: HandGCAT, cfg: RunConfig, path, extra: dict | None = None) -> Path:
    meta = {"config": dump_config(cfg), "hand_model_seed": model.hand.seed} | (extra or {})
    return checkpoint.save_arrays(path, model.state_dict(), meta)


def load_checkpoint(path) -> tuple[HandGCAT, RunConfig]:
    arrays, meta = checkpoint.load_arrays(path)
    cfg = parse_config(meta["config"])
    model = build_model(cfg)
    model.load_state_dict(arrays)
    return model, cfg


def predict(model: HandGCAT, ds: SyntheticDataset, cfg: RunConfig, batch: int = 8):
    """Joints and vertices (hand frame) for every sample, with seeded test-time pose noise."""
    dtype = np.float64 if cfg.precision == "float64" else np.float32
    rng = np.random.default_rng([cfg.seed, 2])
    joints, verts = [], []
    with precision(cfg.precision), no_grad():
        for start in range(0, len(ds), batch):
            b = ds.batch(range(start, min(start + batch, len(ds))))
            pose = add_pose_noise(b["pose2d"], cfg.kgc.noise_sigma, rng)
            out = model(b["image"].astype(dtype) / 255.0, pose)
            joints.append(out["joints"].data.astype(np.float64))
            verts.append(out["verts"].data.astype(np.float64))
    return np.concatenate(joints), np.concatenate(verts)


def evaluate_predictions(pred_joints, pred_verts, ds: SyntheticDataset) -> tuple[MetricsReport, list]:
    """Overall report plus one row per occlusion bin (bins with no samples are skipped)."""
    shift = np.stack([s.transl for s in ds.samples])[:, None, :]
    gt_j = np.stack([s.joints3d for s in ds.samples]) - shift
    gt_v = np.stack([s.mesh for s in ds.samples]) - shift
    ratios = np.array([s.occlusion_ratio for s in ds.samples])
    report = summarize(pred_joints, gt_j, pred_verts, gt_v)
    report.check()
    bins = []
    for lo, hi in OCCLUSION_BINS:
        sel = (ratios >= lo) & ((ratios < hi) if hi < 1.0 else (ratios <= hi))
        if sel.any():
            rep = summarize(pred_joints[sel], gt_j[sel], pred_verts[sel], gt_v[sel])
            rep.check()
            bins.append({"bin": f"[{lo},{hi}{']' if hi == 1.0 else ')'}"} | asdict(rep))
    return report, bins


def evaluate_model(model: HandGCAT, ds: SyntheticDataset, cfg: RunConfig):
    pj, pv = predict(model, ds, cfg)
    return evaluate_predictions(pj, pv, ds)


def evaluate(checkpoint_path, ds: SyntheticDataset, out_dir=None):
    model, cfg = load_checkpoint(checkpoint_path)
    report, bins = evaluate_model(model, ds, cfg)
    if out_dir:
        write_report(report, bins, out_dir, cfg)
    return report, bins


def write_report(report: MetricsReport, bins: list, out_dir, cfg: RunConfig | None = None) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {"overall": asdict(report), "occlusion_bins": bins}
    if cfg is not None:
        payload["config"] = cfg.items()
    (out_dir / "report.json").write_text(json.dumps(payload, indent=1))
    with open(out_dir / "report.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["bin", *asdict(report)])
        w.writeheader()
        w.writerow({"bin": "all"} | asdict(report))
        for row in bins:
            w.writerow(row)


# -- ablation ---------------------------------------------------------------------

PRESETS = {
    # KGC architectures: MLP baseline, then 1-5 GCN layers
    "kgc": [{"kgc.variant": "mlp"}] + [{"kgc.variant": "gcn", "kgc.depth": d} for d in range(1, 6)],
    # CAT architectures: two plain transformer layers, then 1-3 CAT blocks
    "cat": [{"cat.variant": "plain_transformer"}] + [{"cat.variant": "cat", "cat.blocks": b} for b in (1, 2, 3)],
}
ABLATION_COLUMNS = ("config", "pa_mpjpe_mm", "pa_mpvpe_mm", "f_at_5", "f_at_15",
                    "mpjpe_mm", "mpvpe_mm", "auc_pck", "auc_pcv", "sample_count")


def expand_grid(grid: dict[str, list]) -> list[dict]:
    """Cartesian product of ``{key: [values]}``."""
    keys = list(grid)
    return [dict(zip(keys, vals)) for vals in itertools.product(*(grid[k] for k in keys))]


def config_label(overrides: dict) -> str:
    return " ".join(f"{k}={v}" for k, v in overrides.items()) or "base"


def ablate(base: RunConfig, variants: list[dict], out_csv=None, train_set=None, test_set=None) -> list[dict]:
    """Train and evaluate every variant on shared data; one row each."""
    if train_set is None or test_set is None:
        train_set, test_set = make_datasets(base)
    rows = []
    for overrides in variants:
        cfg = base.copy().update(overrides)
        res = train(cfg, train_set)
        report, _ = evaluate_model(res.model, test_set, cfg)
        row = {"config": config_label(overrides)} | {k: v for k, v in asdict(report).items()}
        rows.append({k: row[k] for k in ABLATION_COLUMNS})
        log.info("ablation %s -> PA-MPJPE %.2f", row["config"], report.pa_mpjpe_mm)
    if out_csv:
        Path(out_csv).parent.mkdir(parents=True, exist_ok=True)
        with open(out_csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(ABLATION_COLUMNS))
            w.writeheader()
            w.writerows(rows)
    return rows
