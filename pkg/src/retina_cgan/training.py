"""Alternating discriminator / generator SGD training with step-decay schedules."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import torch

from .dataset import Sample, augment, make_batches
from .errors import ConfigError, DataError, NumericalError
from .evaluation import EvalConfig, evaluate_model
from .losses import (
    LossConfig,
    deep_supervision_loss,
    gan_discriminator_loss,
    gan_generator_loss,
    generator_total_loss,
)
from .models import model_spec
from .preprocess import DatasetStats

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "retina-cgan-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    lr_init: float = 0.001
    lr_decay_factor: float = 0.9
    g_decay_every: int = 200
    d_decay_every: int = 100
    momentum: float = 0.9
    weight_decay: float = 0.0005
    epochs: int = 5000
    batch_train: int = 4
    batch_test: int = 1
    seed: int = 0
    val_every: int = 1
    grad_clip: float = 0.0  # 0 disables clipping
    loss: LossConfig = field(default_factory=LossConfig)

    @property
    def beta(self):
        return self.loss.beta

    @property
    def lambda_gan(self):
        return self.loss.lambda_gan

    def validate(self):
        for key in ("lr_init", "lr_decay_factor"):
            if getattr(self, key) <= 0:
                raise ConfigError(f"train.{key}: must be > 0")
        if not 0 <= self.momentum < 1:
            raise ConfigError("train.momentum: must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("train.weight_decay: must be >= 0")
        for key in ("g_decay_every", "d_decay_every", "epochs", "batch_train", "batch_test", "val_every"):
            if getattr(self, key) < 1:
                raise ConfigError(f"train.{key}: must be >= 1")
        if self.grad_clip < 0:
            raise ConfigError("train.grad_clip: must be >= 0")
        self.loss.validate()
        return self


def lr_at_epoch(lr_init, decay_every, epoch, factor=0.9):
    """Step decay: ``lr_init * factor ** floor(epoch / decay_every)``."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return lr_init * factor ** (epoch // decay_every)


def make_optimizer(params, config: TrainConfig):
    # PyTorch SGD folds weight decay into the gradient (L2 penalty) before momentum.
    return torch.optim.SGD(params, lr=config.lr_init, momentum=config.momentum, weight_decay=config.weight_decay)


def set_lr(optimizer, lr):
    for group in optimizer.param_groups:
        group["lr"] = lr


@dataclass
class StepMetrics:
    seg_loss: float
    gan_loss: float = 0.0
    d_loss: float = 0.0
    total: float = 0.0


def _ensure_finite(batch_id, **losses):
    bad = {k: v for k, v in losses.items() if not math.isfinite(v)}
    if bad:
        raise NumericalError(f"non-finite loss on batch {batch_id}: {bad}")


def train_step(batch, gen, disc, g_opt, d_opt, config: TrainConfig, batch_id=None) -> StepMetrics:
    """One discriminator update followed by one generator update.

    The discriminator sees (image, mask) as real and (image, detached fused
    map) as fake. The generator then minimizes deep supervision plus
    ``lambda_gan`` times the adversarial term, scored by the freshly updated
    discriminator. With ``lambda_gan == 0`` or no discriminator the
    adversarial branch is skipped entirely.
    """
    images, masks = batch
    lc = config.loss
    adversarial = disc is not None and lc.lambda_gan > 0
    outs = gen(images)
    if not all(torch.isfinite(m).all() for m in outs.all_maps()):
        raise NumericalError(f"non-finite generator output on batch {batch_id}")

    d_loss_value = 0.0
    if adversarial:
        disc.requires_grad_(True)
        d_opt.zero_grad(set_to_none=True)
        d_loss = gan_discriminator_loss(disc(images, masks), disc(images, outs.fused_map.detach()))
        d_loss_value = d_loss.item()
        _ensure_finite(batch_id, d_loss=d_loss_value)
        d_loss.backward()
        if config.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(disc.parameters(), config.grad_clip)
        d_opt.step()

    g_opt.zero_grad(set_to_none=True)
    seg = deep_supervision_loss(outs, masks, lc.beta, lc.eps)
    if adversarial:
        disc.requires_grad_(False)
        gan = gan_generator_loss(disc(images, outs.fused_map), lc.gan_loss_form)
        total = generator_total_loss(seg, gan, lc.lambda_gan)
        gan_value = gan.item()
    else:
        total = seg
        gan_value = 0.0
    metrics = StepMetrics(seg.item(), gan_value, d_loss_value, total.item())
    _ensure_finite(batch_id, seg_loss=metrics.seg_loss, gan_loss=metrics.gan_loss, total=metrics.total)
    total.backward()
    if config.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(gen.parameters(), config.grad_clip)
    g_opt.step()
    if adversarial:
        disc.requires_grad_(True)
    return metrics


@dataclass
class ValidationMetrics:
    ap: float
    f1: float


def validate(gen, val_samples: Sequence[Sample], stats: Optional[DatasetStats] = None,
             eval_config: Optional[EvalConfig] = None) -> ValidationMetrics:
    if not val_samples:
        raise DataError("validation set is empty")
    ec = eval_config or EvalConfig()
    report = evaluate_model(gen, list(val_samples), ec.threshold, stats=stats, tile=ec.tile, stride=ec.stride)
    return ValidationMetrics(report.ap, report.f1)


@dataclass
class TrainState:
    epoch: int
    generator: torch.nn.Module
    discriminator: Optional[torch.nn.Module]
    g_opt: torch.optim.Optimizer
    d_opt: Optional[torch.optim.Optimizer]
    best_val_ap: float = -1.0
    history: List[dict] = field(default_factory=list)


def save_checkpoint(path, state: TrainState, *, config_hash="", manifest=None, stats=None, extra=None):
    """Write atomically: temp file in the same directory, then rename."""
    path = Path(path)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "epoch": state.epoch,
        "model_spec": model_spec(state.generator, state.discriminator),
        "generator": state.generator.state_dict(),
        "discriminator": None if state.discriminator is None else state.discriminator.state_dict(),
        "g_opt": state.g_opt.state_dict(),
        "d_opt": None if state.d_opt is None else state.d_opt.state_dict(),
        "best_val_ap": state.best_val_ap,
        "history": state.history,
        "config_hash": config_hash,
        "manifest": None if manifest is None else str(manifest),
        "stats": None if stats is None else stats.to_dict(),
    }
    if extra:
        payload.update(extra)
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)


def load_checkpoint(path):
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(ckpt, dict) or ckpt.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a checkpoint written by this package")
    if ckpt.get("version", 0) > CHECKPOINT_VERSION:
        raise ValueError(f"{path}: checkpoint version {ckpt['version']} is newer than supported")
    return ckpt


def _epoch_samples(samples, config, epoch, crop_size, max_rotation, foreground_prob):
    out = []
    for i, s in enumerate(samples):
        rng = np.random.default_rng([config.seed, epoch, 1, i])
        out.append(augment(s, crop_size, max_rotation, rng, foreground_prob))
    return out


def _truncate_log(log_path, last_epoch):
    if not log_path.exists():
        return
    keep = [ln for ln in log_path.read_text().splitlines() if ln and json.loads(ln)["epoch"] <= last_epoch]
    log_path.write_text("".join(ln + "\n" for ln in keep))


def fit(config: TrainConfig, train_samples: Sequence[Sample], val_samples: Sequence[Sample] = (), *,
        generator, discriminator=None, stats: Optional[DatasetStats] = None, crop_size=512,
        max_rotation=20.0, crop_foreground_prob=0.0, eval_config: Optional[EvalConfig] = None,
        run_dir=None, manifest=None, config_hash="", resume=False, epochs=None) -> TrainState:
    """Train for ``config.epochs`` (or ``epochs``) epochs, optionally checkpointing into ``run_dir``.

    Every random choice of epoch ``e`` is drawn from generators seeded by
    ``(config.seed, e, ...)``, so a resumed run replays the same batches as an
    uninterrupted one.
    """
    config.validate()
    if not train_samples:
        raise DataError("training set is empty")
    adversarial = discriminator is not None and config.lambda_gan > 0
    g_opt = make_optimizer(generator.parameters(), config)
    d_opt = make_optimizer(discriminator.parameters(), config) if adversarial else None
    state = TrainState(-1, generator, discriminator if adversarial else None, g_opt, d_opt)

    run_dir = Path(run_dir) if run_dir is not None else None
    log_path = None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        log_path = run_dir / "log.jsonl"
        latest = run_dir / "ckpt_latest"
        if resume and latest.exists():
            ckpt = load_checkpoint(latest)
            generator.load_state_dict(ckpt["generator"])
            g_opt.load_state_dict(ckpt["g_opt"])
            if adversarial:
                discriminator.load_state_dict(ckpt["discriminator"])
                d_opt.load_state_dict(ckpt["d_opt"])
            state.epoch = ckpt["epoch"]
            state.best_val_ap = ckpt["best_val_ap"]
            state.history = list(ckpt["history"])
            _truncate_log(log_path, state.epoch)
            logger.info("resumed from epoch %d", state.epoch)
        elif log_path.exists():
            log_path.unlink()

    n_epochs = config.epochs if epochs is None else epochs
    log_file = open(log_path, "a") if log_path is not None else None
    try:
        generator.train()
        if adversarial:
            discriminator.train()
        for epoch in range(state.epoch + 1, n_epochs):
            g_lr = lr_at_epoch(config.lr_init, config.g_decay_every, epoch, config.lr_decay_factor)
            d_lr = lr_at_epoch(config.lr_init, config.d_decay_every, epoch, config.lr_decay_factor)
            set_lr(g_opt, g_lr)
            if adversarial:
                set_lr(d_opt, d_lr)
            samples = _epoch_samples(train_samples, config, epoch, crop_size, max_rotation, crop_foreground_prob)
            order_rng = np.random.default_rng([config.seed, epoch, 0])
            totals = []
            for step, batch in enumerate(make_batches(samples, config.batch_train, order_rng, stats)):
                try:
                    m = train_step(batch, generator, state.discriminator, g_opt, d_opt, config,
                                   batch_id=(epoch, step))
                except NumericalError:
                    if run_dir is not None:
                        torch.save({"epoch": epoch, "step": step, "images": batch[0], "masks": batch[1]},
                                   run_dir / "nonfinite_batch.pt")
                    raise
                totals.append(m)
                if log_file is not None:
                    rec = {"epoch": epoch, "step": step, **dataclasses.asdict(m), "g_lr": g_lr,
                           "d_lr": d_lr if adversarial else None}
                    log_file.write(json.dumps(rec) + "\n")
            record = {
                "epoch": epoch,
                "seg_loss": float(np.mean([m.seg_loss for m in totals])),
                "gan_loss": float(np.mean([m.gan_loss for m in totals])),
                "d_loss": float(np.mean([m.d_loss for m in totals])),
                "total": float(np.mean([m.total for m in totals])),
            }
            improved = False
            if val_samples and ((epoch + 1) % config.val_every == 0 or epoch == n_epochs - 1):
                vm = validate(generator, val_samples, stats, eval_config)
                record.update(val_ap=vm.ap, val_f1=vm.f1)
                if vm.ap > state.best_val_ap:
                    state.best_val_ap = vm.ap
                    improved = True
                if log_file is not None:
                    log_file.write(json.dumps({"epoch": epoch, "val_ap": vm.ap, "val_f1": vm.f1}) + "\n")
            elif not val_samples:
                improved = True
            state.history.append(record)
            state.epoch = epoch
            if log_file is not None:
                log_file.flush()
            if run_dir is not None:
                save_checkpoint(run_dir / "ckpt_latest", state, config_hash=config_hash, manifest=manifest,
                                stats=stats)
                if improved:
                    save_checkpoint(run_dir / "ckpt_best", state, config_hash=config_hash, manifest=manifest,
                                    stats=stats)
            logger.info("epoch %d: %s", epoch, record)
    finally:
        if log_file is not None:
            log_file.close()
    return state
