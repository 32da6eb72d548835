"""Seeded Adam training loop with periodic checkpoints and exact resume."""

from __future__ import annotations

import logging
import math
from pathlib import Path
from typing import Callable

import torch
from torch import nn

from headmotion.checkpoint import load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, checkpoint: Path | None, last_good: dict | None):
        where = f"; last good checkpoint at {checkpoint}" if checkpoint else ""
        super().__init__(f"loss became non-finite at step {step}{where}")
        self.step = step
        self.checkpoint = checkpoint
        self.last_good = last_good


def lr_at(step: int, steps: int, lr: float, schedule: str = "constant", warmup: int = 0) -> float:
    """Learning rate for ``step``: linear warmup, then constant or cosine decay to zero."""
    if warmup and step < warmup:
        return lr * (step + 1) / warmup
    if schedule == "constant":
        return lr
    if schedule == "cosine":
        span = max(1, steps - warmup)
        return 0.5 * lr * (1.0 + math.cos(math.pi * min(step - warmup, span) / span))
    raise ValueError(f"unknown lr schedule {schedule!r}")


def _optimizer(model: nn.Module, lr: float) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=lr, betas=ADAM_BETAS, eps=ADAM_EPS, foreach=False)


def training_tensors(model: nn.Module, opt: torch.optim.Optimizer) -> dict[str, torch.Tensor]:
    tensors = dict(model.state_dict())
    names = [n for n, _ in model.named_parameters()]
    for name, p in zip(names, model.parameters()):
        st = opt.state.get(p)
        if st:
            tensors[f"optim.exp_avg.{name}"] = st["exp_avg"]
            tensors[f"optim.exp_avg_sq.{name}"] = st["exp_avg_sq"]
    return tensors


def restore(model: nn.Module, opt: torch.optim.Optimizer | None, tensors: dict, step: int) -> None:
    state = {k: v for k, v in tensors.items() if not k.startswith("optim.")}
    model.load_state_dict(state)
    if opt is None or step == 0:
        return
    names = [n for n, _ in model.named_parameters()]
    opt_state = {}
    for i, name in enumerate(names):
        key = f"optim.exp_avg.{name}"
        if key in tensors:
            opt_state[i] = {
                "step": torch.tensor(float(step)),
                "exp_avg": tensors[key].clone(),
                "exp_avg_sq": tensors[f"optim.exp_avg_sq.{name}"].clone(),
            }
    sd = opt.state_dict()
    sd["state"] = opt_state
    opt.load_state_dict(sd)


def fit(
    model: nn.Module,
    loss_at_step: Callable[[int], torch.Tensor],
    *,
    steps: int,
    lr: float,
    meta: dict,
    ckpt_dir: str | Path | None = None,
    ckpt_every: int = 0,
    grad_clip: float = 1.0,
    lr_schedule: str = "constant",
    warmup: int = 0,
    resume: bool = False,
    on_step: Callable[[int, float], None] | None = None,
) -> list[float]:
    """Run ``steps`` Adam updates; ``loss_at_step(k)`` must be seeded by ``k`` alone.

    Per-step seeding makes a resumed run reproduce the uninterrupted one.
    Returns the full loss history (including steps restored on resume).
    """
    opt = _optimizer(model, lr)
    history: list[float] = []
    start = 0
    ckpt_dir = Path(ckpt_dir) if ckpt_dir is not None else None
    if resume:
        if ckpt_dir is None:
            raise ValueError("resume needs a checkpoint directory")
        tensors, manifest = load_checkpoint(ckpt_dir)
        start = int(manifest["step"])
        history = list(manifest["history"])
        restore(model, opt, tensors, start)
        log.info("resumed from %s at step %d", ckpt_dir, start)

    def snapshot(step: int) -> None:
        if ckpt_dir is not None:
            save_checkpoint(ckpt_dir, training_tensors(model, opt), {**meta, "step": step, "history": history})

    last_good = {k: v.clone() for k, v in model.state_dict().items()}
    if ckpt_dir is not None and not resume:
        snapshot(0)
    model.train()
    for step in range(start, steps):
        for group in opt.param_groups:
            group["lr"] = lr_at(step, steps, lr, lr_schedule, warmup)
        opt.zero_grad(set_to_none=True)
        loss = loss_at_step(step)
        value = float(loss.detach())
        if not math.isfinite(value):
            model.load_state_dict(last_good)
            raise TrainingDiverged(step, ckpt_dir, last_good)
        loss.backward()
        if grad_clip > 0:
            nn.utils.clip_grad_norm_(model.parameters(), grad_clip)
        opt.step()
        history.append(value)
        if on_step is not None:
            on_step(step, value)
        done = step + 1
        if ckpt_every and done % ckpt_every == 0 and done != steps:
            last_good = {k: v.clone() for k, v in model.state_dict().items()}
            snapshot(done)
    model.eval()
    if ckpt_dir is not None and steps > start:
        snapshot(steps)
    return history
