"""
Loss, schedule, optimizer and the epoch loop.
"""

import csv
import io
import json
import logging
import math
import os
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch.utils.data import DataLoader

from . import config
from .checkpoint import load_checkpoint, restore_model, save_checkpoint
from .config import RunConfig, TrainConfig
from .data import SliceDataset, collate_samples
from .errors import NonFiniteLoss, NumericError
from .metrics import ReconReport
from .utils import atomic_write_text, resolve_device, seed_everything

logger = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "lr", "train_loss", "val_psnr", "val_ssim", "val_nmse", "best_loss")


def lr_at(epoch, cfg: TrainConfig):
    """Linear warm-up 0 -> lr, then cosine annealing to 0 at ``cfg.epochs``. Epochs may be fractional."""
    epoch = min(max(epoch, 0.0), float(cfg.epochs))
    warm = cfg.warmup_epochs
    if warm > 0 and epoch < warm:
        return cfg.lr * epoch / warm
    progress = (epoch - warm) / (cfg.epochs - warm)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def l1_loss(pred, target):
    return F.l1_loss(pred, target)


def make_optimizer(model, cfg: TrainConfig):
    """AdamW; parameters flagged ``_no_weight_decay`` (A_log, D) and 1-D tensors skip decay."""
    decay, no_decay = [], []
    for p in model.parameters():
        if not p.requires_grad:
            continue
        (no_decay if getattr(p, "_no_weight_decay", False) or p.ndim < 2 else decay).append(p)
    groups = [
        {"params": decay, "weight_decay": cfg.weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ]
    return torch.optim.AdamW(groups, lr=cfg.lr, betas=cfg.betas)


def set_lr(optimizer, lr):
    for group in optimizer.param_groups:
        group["lr"] = lr


def dump_diagnostics(directory, batch, model, loss_value):
    """JSON snapshot of what went non-finite: input stats and per-parameter health."""
    os.makedirs(directory, exist_ok=True)
    report = {
        "loss": repr(loss_value),
        "slice_ids": list(batch.slice_ids),
        "zero_filled_finite": bool(torch.isfinite(batch.zero_filled).all()),
        "target_finite": bool(torch.isfinite(batch.target).all()),
        "parameters": {
            name: {
                "finite": bool(torch.isfinite(p).all()),
                "abs_max": float(p.detach().abs().max()) if p.numel() else 0.0,
            }
            for name, p in model.named_parameters()
        },
    }
    path = os.path.join(directory, "nonfinite_diagnostics.json")
    atomic_write_text(path, json.dumps(report, indent=2, sort_keys=True) + "\n")
    logger.error(f"Non-finite loss; diagnostics written to {path}")
    return path


def train_step(batch, model, optimizer, diagnostics_dir=None):
    """
    One AdamW update on the mean l1 error over both channels. ``optimizer``
    (its moments and step counts) and the model weights are updated in place;
    the returned value is the pre-update loss.
    """
    model.train()
    optimizer.zero_grad(set_to_none=True)
    try:
        out = model(batch.zero_filled, batch.ksp)
        loss = l1_loss(out, batch.target)
    except NumericError as e:
        if diagnostics_dir:
            dump_diagnostics(diagnostics_dir, batch, model, float("nan"))
        raise NonFiniteLoss(f"forward pass went non-finite: {e}") from e
    if not bool(torch.isfinite(loss)):
        if diagnostics_dir:
            dump_diagnostics(diagnostics_dir, batch, model, loss.item())
        raise NonFiniteLoss(f"loss is {loss.item()} on slices {batch.slice_ids}")
    loss.backward()
    optimizer.step()
    return loss.item()


@torch.no_grad()
def evaluate(model, samples, batch_size=4, device="cpu", meta=None):
    """Per-slice metrics of the model output against the targets (magnitude images)."""
    model.eval()
    report = ReconReport(meta=dict(meta or {}))
    loader = DataLoader(SliceDataset(samples), batch_size=batch_size, shuffle=False, collate_fn=collate_samples)
    for batch in loader:
        batch = batch.to(device)
        out = model(batch.zero_filled, batch.ksp)
        for i, slice_id in enumerate(batch.slice_ids):
            report.add(slice_id, out[i], batch.target[i])
    return report


def evaluate_zero_filled(samples, meta=None):
    report = ReconReport(meta=dict(meta or {}))
    for s in samples:
        report.add(s.slice_id, s.zero_filled, s.target)
    return report


@dataclass
class FitResult:
    best_path: str
    last_path: str
    history: list = field(default_factory=list)
    best_val_psnr: float = float("-inf")


def _write_log(path, history):
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=LOG_COLUMNS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(history)
    atomic_write_text(path, buf.getvalue())


def _read_log(path):
    if not os.path.isfile(path):
        return []
    with open(path, newline="") as f:
        return [dict(row) for row in csv.DictReader(f)]


def fit(cfg: RunConfig, model, train_samples, val_samples, out_dir, resume=None, until_epoch=None):
    """
    Trains for ``cfg.train.epochs`` epochs. Every epoch writes a validation
    report and the CSV log, refreshes ``last.ckpt`` and replaces
    ``best.ckpt`` when validation PSNR improves. ``resume`` continues from a
    ``last.ckpt``; ``until_epoch`` stops early without changing the schedule.
    """
    tc = cfg.train
    device = resolve_device(tc.device)
    os.makedirs(out_dir, exist_ok=True)
    best_path = os.path.join(out_dir, config.CHECKPOINT_BEST)
    last_path = os.path.join(out_dir, config.CHECKPOINT_LAST)
    log_path = os.path.join(out_dir, config.TRAIN_LOG)
    report_dir = os.path.join(out_dir, "reports")

    model.to(device)
    optimizer = make_optimizer(model, tc)
    start_epoch, best_psnr, best_loss = 0, float("-inf"), float("inf")
    history = []

    if resume:
        ckpt = load_checkpoint(resume, cfg.model)
        restore_model(ckpt, model)
        if ckpt.optimizer_state is not None:
            optimizer.load_state_dict(ckpt.optimizer_state)
        start_epoch = int(ckpt.train_state.get("epoch", 0))
        best_psnr = float(ckpt.train_state.get("best_val_psnr", best_psnr))
        best_loss = float(ckpt.train_state.get("best_loss", best_loss))
        history = _read_log(log_path)[:start_epoch]
        logger.info(f"Resuming from {resume} at epoch {start_epoch}")

    dataset = SliceDataset(train_samples)
    logger.info(
        f"Training on {len(train_samples)} slices, validating on {len(val_samples)} "
        f"({tc.epochs} epochs, batch {tc.batch_size}, device {device})"
    )

    stop = tc.epochs if until_epoch is None else min(until_epoch, tc.epochs)
    for epoch in range(start_epoch, stop):
        loader = DataLoader(
            dataset,
            batch_size=tc.batch_size,
            shuffle=True,
            generator=torch.Generator().manual_seed(tc.seed + epoch),
            collate_fn=collate_samples,
        )
        steps = len(loader)
        losses, lr = [], 0.0
        for i, batch in enumerate(loader):
            lr = lr_at(epoch + (i + 0.5) / steps, tc)
            set_lr(optimizer, lr)
            losses.append(train_step(batch.to(device), model, optimizer, diagnostics_dir=out_dir))
        train_loss = sum(losses) / len(losses)
        best_loss = min(best_loss, train_loss)

        report = evaluate(model, val_samples, tc.batch_size, device, meta={"epoch": epoch + 1})
        report.write(os.path.join(report_dir, f"epoch_{epoch + 1:03d}.csv"))
        agg = report.aggregate
        history.append({
            "epoch": epoch + 1,
            "lr": repr(lr),
            "train_loss": repr(train_loss),
            "val_psnr": repr(agg["psnr"]),
            "val_ssim": repr(agg["ssim"]),
            "val_nmse": repr(agg["nmse"]),
            "best_loss": repr(best_loss),
        })
        _write_log(log_path, history)

        if agg["psnr"] > best_psnr:
            best_psnr = agg["psnr"]
            save_checkpoint(best_path, model, cfg.model, train_state={"epoch": epoch + 1, "val_psnr": best_psnr})
        save_checkpoint(
            last_path, model, cfg.model, optimizer,
            train_state={"epoch": epoch + 1, "best_val_psnr": best_psnr, "best_loss": best_loss},
        )
        logger.info(
            f"Epoch {epoch + 1}/{tc.epochs} | lr {lr:.2e} | loss {train_loss:.5f} | "
            f"val PSNR {agg['psnr']:.2f} dB | SSIM {agg['ssim']:.4f} | NMSE {agg['nmse']:.5f}"
        )

    return FitResult(best_path=best_path, last_path=last_path, history=history, best_val_psnr=best_psnr)


def seeded_model(model_cls, model_cfg, seed):
    """Builds a model from a freshly seeded RNG so initial weights depend only on the seed."""
    seed_everything(seed)
    return model_cls(model_cfg)
