"""Training loop: clip sampling, augmentation, propagation-aware forward,
step-decayed AdamW, loss-curve CSV, and periodic checkpoints."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch

from . import vocab
from .augment import augment_clip
from .checkpoint import (
    load_checkpoint,
    restore_model,
    restore_optimizer,
    restore_rng,
    save_checkpoint,
)
from .config import RunConfig, write_config
from .dataset import load_dataset, prompt_tokens, resize_max_side, sample_clip
from .errors import NumericError, ValidationError
from .model import ReferringSequenceSegmenter, frames_to_tensor, run_sequence_train
from .synthetic import tight_box


def build_model(config: RunConfig) -> ReferringSequenceSegmenter:
    return ReferringSequenceSegmenter(
        vocab_size=vocab.vocab_size(),
        n_queries=config.n_queries,
        propagate_box=config.propagate_box,
        propagate_mask=config.propagate_mask,
        propagate_query=config.propagate_query,
    )


def learning_rate_for_epoch(config: RunConfig, epoch: int) -> float:
    """Initial rate until the decay epoch has completed, then decayed."""
    if epoch >= config.lr_decay_epoch:
        return config.lr * config.lr_decay_factor
    return config.lr


def _set_lr(optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


def train(config: RunConfig) -> Path:
    """Run the configured training; returns the final checkpoint path."""
    config.validate()
    if not config.data_dir:
        raise ValidationError("config field data_dir is required for training")
    if not config.out_dir:
        raise ValidationError("config field out_dir is required for training")
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_config(config, out_dir / "config_used.cfg")

    sequences = load_dataset(config.data_dir)
    torch.manual_seed(config.seed)
    model = build_model(config)
    optimizer = torch.optim.AdamW(
        model.parameters(),
        lr=config.lr,
        betas=(0.9, 0.999),
        weight_decay=config.weight_decay,
    )
    rng = np.random.default_rng(config.seed)
    coeffs = config.coefficients()

    start_epoch = 0
    global_step = 0
    if config.resume:
        ckpt = load_checkpoint(config.resume)
        restore_model(model, ckpt)
        restore_optimizer(optimizer, model, ckpt)
        resumed_rng = restore_rng(ckpt)
        if resumed_rng is not None:
            rng = resumed_rng
        start_epoch = int(ckpt.meta.get("epoch", 0))
        global_step = int(ckpt.meta.get("step", 0))

    csv_path = out_dir / "loss_curve.csv"
    csv_mode = "a" if config.resume and csv_path.exists() else "w"
    csv_file = open(csv_path, csv_mode)
    if csv_mode == "w":
        csv_file.write("step,epoch,lr,loss\n")

    model.train()
    final_path = out_dir / "checkpoint_final.npz"
    try:
        for epoch in range(start_epoch, config.epochs):
            lr = learning_rate_for_epoch(config, epoch)
            _set_lr(optimizer, lr)
            order = rng.permutation(len(sequences))
            for seq_pos in range(0, len(order), config.clips_per_batch):
                batch_ids = order[seq_pos : seq_pos + config.clips_per_batch]
                optimizer.zero_grad(set_to_none=True)
                batch_loss = 0.0
                for seq_idx in batch_ids:
                    seq = sequences[int(seq_idx)]
                    frames, masks, boxes = sample_clip(seq, config.clip_length, rng)
                    if config.max_resize > 0:
                        frames, masks = resize_max_side(frames, masks, config.max_resize)
                        boxes = np.stack([tight_box(m) for m in masks])
                    if config.augment:
                        frames, masks, boxes = augment_clip(frames, masks, rng)
                    result = run_sequence_train(
                        model,
                        frames_to_tensor(frames),
                        prompt_tokens(seq, config.prompt_mode),
                        torch.as_tensor(boxes, dtype=torch.float32),
                        torch.as_tensor(masks),
                        coeffs,
                    )
                    loss = result.total_loss / len(batch_ids)
                    if not torch.isfinite(loss):
                        raise NumericError(
                            f"non-finite loss at step {global_step + 1} "
                            f"(epoch {epoch}, sequence index {int(seq_idx)}, "
                            f"run seed {config.seed})"
                        )
                    loss.backward()
                    batch_loss += float(loss.detach())
                if config.grad_clip > 0:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
                optimizer.step()
                global_step += 1
                csv_file.write(f"{global_step},{epoch},{lr!r},{batch_loss!r}\n")
                csv_file.flush()

            done = epoch + 1
            if done % config.checkpoint_every_epochs == 0 or done == config.epochs:
                save_checkpoint(
                    out_dir / f"checkpoint_epoch{done:04d}.npz",
                    model,
                    config.to_dict(),
                    optimizer=optimizer,
                    step=global_step,
                    epoch=done,
                    numpy_rng=rng,
                )
        save_checkpoint(
            final_path,
            model,
            config.to_dict(),
            optimizer=optimizer,
            step=global_step,
            epoch=config.epochs,
            numpy_rng=rng,
        )
    finally:
        csv_file.close()
    return final_path
