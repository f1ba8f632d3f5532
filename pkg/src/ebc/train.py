"""Training loop: combined-loss optimization over augmented crops.

One process per run. Adam with a cosine-annealed learning rate decaying to
zero over the epoch budget; the text-embedding bank stays frozen throughout
(it is a buffer, not a parameter, and its fingerprint is checked after
training). Determinism: model init draws from the torch seed, while data
order and augmentations derive stateless seeds from (seed, epoch, index),
so a resumed run continues exactly where the interrupted one left off.
"""

from __future__ import annotations

import json
import logging
import random
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .bins import BinPolicy
from .config import (
    augment_cfg_from,
    config_hash,
    eval_window,
    ot_cfg_from,
    policy_from_cfg,
)
from .data import CrowdDataset, epoch_batches, load_manifest
from .evaluation import evaluate_manifest
from .head import (
    ClassificationCounter,
    RegressionCounter,
    build_encoder,
    save_checkpoint,
)
from .labels import dataset_statistics
from .losses import batched_count_loss, classification_loss
from .prompts import HashTextEncoder, TextEncoder, build_prompt_set, embed_prompts

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, batch_index: int):
        super().__init__(
            f"non-finite loss at epoch {epoch}, batch {batch_index}; aborting"
        )
        self.epoch = epoch
        self.batch_index = batch_index


def set_seed(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)


def build_model(cfg: dict, policy: BinPolicy, text_encoder: TextEncoder | None = None):
    """Builds the configured counting model (classification or regression)."""
    mc = cfg["model"]
    encoder = build_encoder(mc)
    if mc["head"] == "regression":
        return RegressionCounter(encoder, r=mc["r"])
    if text_encoder is None:
        text_encoder = HashTextEncoder(dim=mc["embedding_dim"])
    prompt_set = build_prompt_set(policy)
    bank = embed_prompts(prompt_set, text_encoder)
    return ClassificationCounter(
        encoder,
        policy,
        bank,
        r=mc["r"],
        logit_scale_init=mc["logit_scale_init"],
    )


@dataclass
class TrainResult:
    workdir: Path
    best_checkpoint: Path
    last_checkpoint: Path
    log_path: Path
    best_val_mae: float
    log_rows: list[dict]


def _write_log(path: Path, rows: list[dict]) -> None:
    path.write_text("".join(json.dumps(row, sort_keys=True) + "\n" for row in rows))


def train(
    cfg: dict,
    workdir: str | Path,
    resume: bool = False,
    text_encoder: TextEncoder | None = None,
    quiet: bool = False,
    model_builder=None,
    batch_builder=None,
) -> TrainResult:
    """Runs the full training loop described by ``cfg`` under ``workdir``.

    Checkpoints the best-validation-MAE and the last epoch; ``resume=True``
    continues from the last checkpoint. Raises :class:`TrainingDiverged` on
    a non-finite loss, identifying the offending batch.

    ``model_builder(cfg)`` and ``batch_builder(dataset, epoch)`` override
    the integer-bin defaults; the experiment harness uses them to train
    comparison arms (e.g. interval bins over smoothed targets) through the
    same loop. ``bins.mode`` other than ``integer`` requires both.
    """
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    seed = cfg["optim"]["seed"]
    set_seed(seed)

    r = cfg["model"]["r"]
    root = cfg["data"]["root"]
    train_manifest = load_manifest(root, cfg["data"]["train_split"])
    val_manifest = load_manifest(root, cfg["data"]["val_split"])

    mode = cfg["bins"].get("mode", "integer")
    policy: BinPolicy | None = None
    if mode == "integer":
        policy = policy_from_cfg(cfg)
        if cfg["bins"]["calibrate_terminal"] and cfg["bins"]["representatives"] is None:
            stats = dataset_statistics(train_manifest.annotations, r, policy)
            if stats.tail_mean is not None:
                policy = policy.with_terminal_representative(stats.tail_mean)
    elif model_builder is None or batch_builder is None:
        raise ValueError(
            f"bins.mode={mode!r} is a harness-only comparison arm; train it "
            "through the ablation runner"
        )

    if model_builder is not None:
        model = model_builder(cfg)
    else:
        model = build_model(cfg, policy, text_encoder=text_encoder)
    is_classification = isinstance(model, ClassificationCounter)
    bank_before = model.bank_fingerprint() if is_classification else None

    lam = float(cfg["loss"]["lambda"])
    ot_cfg = ot_cfg_from(cfg)
    clamp_density = cfg["loss"]["clamp_density"]
    epochs = cfg["optim"]["epochs"]
    optimizer = torch.optim.Adam(
        model.parameters(),
        lr=cfg["optim"]["lr"],
        weight_decay=cfg["optim"]["weight_decay"],
    )
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(
        optimizer, T_max=epochs, eta_min=0.0
    )

    dataset = CrowdDataset(train_manifest, augment_cfg_from(cfg), base_seed=seed)
    if batch_builder is None:
        batch_size = cfg["optim"]["batch_size"]

        def batch_builder(ds, epoch):
            return epoch_batches(
                ds, batch_size, epoch, r, policy, clamp_density=clamp_density
            )

    window = eval_window(cfg)
    mean = tuple(cfg["data"]["normalize_mean"])
    std = tuple(cfg["data"]["normalize_std"])

    best_path = workdir / "best.pt"
    last_path = workdir / "last.pt"
    log_path = workdir / "log.jsonl"
    chash = config_hash(cfg)
    (workdir / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True))

    start_epoch = 0
    best_val_mae = float("inf")
    log_rows: list[dict] = []
    if resume and last_path.exists():
        snap = torch.load(last_path, map_location="cpu", weights_only=False)
        model.load_state_dict(snap["state_dict"])
        optimizer.load_state_dict(snap["extra"]["optimizer"])
        scheduler.load_state_dict(snap["extra"]["scheduler"])
        start_epoch = snap["extra"]["epoch"] + 1
        best_val_mae = snap["extra"]["best_val_mae"]
        if log_path.exists():
            log_rows = [json.loads(l) for l in log_path.read_text().splitlines()]
            log_rows = [row for row in log_rows if row["epoch"] < start_epoch]

    for epoch in range(start_epoch, epochs):
        model.train()
        t0 = time.time()
        cls_sum, cnt_sum, n_batches = 0.0, 0.0, 0
        for b_idx, batch in enumerate(batch_builder(dataset, epoch)):
            optimizer.zero_grad()
            prob, density = model(batch.images)
            bsz = batch.images.shape[0]
            if is_classification:
                cls = classification_loss(prob, batch.onehot) / bsz
                if lam > 0:
                    cnt = batched_count_loss(density, batch.density, ot_cfg).mean()
                    loss = cls + lam * cnt
                else:
                    cnt = torch.zeros(())
                    loss = cls
            else:
                cls = torch.zeros(())
                cnt = batched_count_loss(density, batch.density, ot_cfg).mean()
                loss = cnt
            if not torch.isfinite(loss):
                raise TrainingDiverged(epoch, b_idx)
            loss.backward()
            optimizer.step()
            if is_classification:
                model.clamp_logit_scale()
            cls_sum += float(cls.detach())
            cnt_sum += float(cnt.detach())
            n_batches += 1
        scheduler.step()

        model.eval()
        val = evaluate_manifest(model, val_manifest, window, r, mean, std)
        row = {
            "epoch": epoch,
            "train_class_loss": cls_sum / max(n_batches, 1),
            "train_count_loss": cnt_sum / max(n_batches, 1),
            "val_mae": val.mae,
            "val_rmse": val.rmse,
            "lr": scheduler.get_last_lr()[0],
            "seconds": round(time.time() - t0, 3),
        }
        log_rows.append(row)
        _write_log(log_path, log_rows)
        if not quiet:
            logger.info(
                "epoch %d: class %.4f count %.4f val MAE %.3f RMSE %.3f",
                epoch,
                row["train_class_loss"],
                row["train_count_loss"],
                val.mae,
                val.rmse,
            )

        extra = {
            "epoch": epoch,
            "optimizer": optimizer.state_dict(),
            "scheduler": scheduler.state_dict(),
            "best_val_mae": min(best_val_mae, val.mae),
            "val_mae": val.mae,
        }
        save_checkpoint(model, last_path, cfg["model"], config_hash=chash, extra=extra)
        if val.mae < best_val_mae:
            best_val_mae = val.mae
            save_checkpoint(
                model, best_path, cfg["model"], config_hash=chash, extra=extra
            )

    if is_classification and model.bank_fingerprint() != bank_before:
        raise RuntimeError("text-embedding bank changed during training")

    return TrainResult(
        workdir=workdir,
        best_checkpoint=best_path,
        last_checkpoint=last_path,
        log_path=log_path,
        best_val_mae=best_val_mae,
        log_rows=log_rows,
    )
