"""Deterministic mini-batch training with decoupled-weight-decay Adam.

A fixed seed pins initialization, batch order, and dropout, so two runs with
the same configuration (and thread count) produce identical logs and
parameters, and a run resumed from a checkpoint continues exactly as the
uninterrupted run would have.
"""

from __future__ import annotations

import json
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .dataio import NormalizationStats, SampleWindow, stack_windows
from .loss import LossConfig, composite_loss
from .model import MODEL_KINDS, ModelConfig, build_model

CHECKPOINT_FORMAT_VERSION = 1


class TrainingDivergedError(RuntimeError):
    """Raised when a loss or gradient becomes non-finite."""


class CheckpointError(RuntimeError):
    """Raised for unreadable, version-mismatched, or incompatible checkpoints."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    learning_rate: float = 1e-4
    batch_size: int = 64
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip_norm: float | None = None
    seed: int = 2024
    model_kind: str = "tft"
    trigger_weighting: str = "uniform"

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.model_kind not in MODEL_KINDS:
            raise ValueError(f"unknown model_kind {self.model_kind!r}; expected one of {MODEL_KINDS}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class TrainLogEntry:
    epoch: int
    split: str          # "train" or "val"
    mode: str           # "train" (dropout on) or "eval"
    l_prob: float
    l_quantile: float
    l_total: float
    wall_time: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


class AdamW(torch.optim.Optimizer):
    """Adam with decoupled weight decay.

    Decay is applied directly to the parameter (p -= lr * wd * p) before the
    bias-corrected adaptive step; it never enters the moment estimates.
    """

    def __init__(self, named_params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        if lr <= 0:
            raise ValueError(f"learning rate must be > 0, got {lr}")
        groups = [{"params": [p], "name": name} for name, p in named_params]
        defaults = {"lr": lr, "betas": betas, "eps": eps, "weight_decay": weight_decay}
        super().__init__(groups, defaults)

    @torch.no_grad()
    def step(self, closure=None):
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()
        for group in self.param_groups:
            lr, (beta1, beta2), eps, wd = (
                group["lr"], group["betas"], group["eps"], group["weight_decay"]
            )
            for p in group["params"]:
                if p.grad is None:
                    continue
                grad = p.grad
                if not torch.isfinite(grad).all():
                    raise TrainingDivergedError(
                        f"non-finite gradient in parameter {group.get('name', '?')!r}"
                    )
                state = self.state[p]
                if not state:
                    state["step"] = 0
                    state["exp_avg"] = torch.zeros_like(p)
                    state["exp_avg_sq"] = torch.zeros_like(p)
                state["step"] += 1
                t = state["step"]
                m, v = state["exp_avg"], state["exp_avg_sq"]
                m.mul_(beta1).add_(grad, alpha=1 - beta1)
                v.mul_(beta2).addcmul_(grad, grad, value=1 - beta2)
                if wd != 0:
                    p.add_(p, alpha=-lr * wd)
                m_hat = m / (1 - beta1**t)
                v_hat = v / (1 - beta2**t)
                p.addcdiv_(m_hat, v_hat.sqrt().add_(eps), value=-lr)
        return loss


def save_checkpoint(
    path,
    model: torch.nn.Module,
    model_cfg: ModelConfig,
    model_kind: str,
    stats: NormalizationStats,
    train_cfg: TrainConfig,
    optimizer: AdamW | None = None,
    epoch: int = 0,
    best_val: float | None = None,
    best_epoch: int = 0,
) -> None:
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "model_kind": model_kind,
        "model_config": model_cfg.to_dict(),
        "train_config": train_cfg.to_dict(),
        "norm_stats": stats.to_dict(),
        "state_dict": model.state_dict(),
        "optimizer_state": optimizer.state_dict() if optimizer is not None else None,
        "epoch": epoch,
        "best_val": best_val,
        "best_epoch": best_epoch,
        "torch_rng_state": torch.get_rng_state(),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


@dataclass
class Checkpoint:
    model_kind: str
    model_cfg: ModelConfig
    train_cfg: TrainConfig
    stats: NormalizationStats
    state_dict: dict
    optimizer_state: dict | None
    epoch: int
    best_val: float | None
    best_epoch: int
    torch_rng_state: torch.Tensor

    def build_model(self) -> torch.nn.Module:
        model = build_model(self.model_cfg, self.model_kind)
        model.load_state_dict(self.state_dict)
        model.eval()
        return model


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    version = payload.get("format_version") if isinstance(payload, dict) else None
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint {path} has format version {version!r}; "
            f"this build reads version {CHECKPOINT_FORMAT_VERSION}"
        )
    return Checkpoint(
        model_kind=payload["model_kind"],
        model_cfg=ModelConfig.from_dict(payload["model_config"]),
        train_cfg=TrainConfig.from_dict(payload["train_config"]),
        stats=NormalizationStats.from_dict(payload["norm_stats"]),
        state_dict=payload["state_dict"],
        optimizer_state=payload["optimizer_state"],
        epoch=payload["epoch"],
        best_val=payload["best_val"],
        best_epoch=payload.get("best_epoch", 0),
        torch_rng_state=payload["torch_rng_state"],
    )


def _to_tensors(windows: list[SampleWindow]) -> dict[str, torch.Tensor]:
    arrays = stack_windows(windows)
    return {
        "static": torch.from_numpy(arrays["static"]).to(torch.float32),
        "weather": torch.from_numpy(arrays["weather"]).to(torch.float32),
        "target_loads": torch.from_numpy(arrays["target_loads"]).to(torch.float32),
        "trigger_targets": torch.from_numpy(arrays["trigger_targets"]).to(torch.float32),
    }


def _epoch_permutation(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def _run_split(model, tensors, loss_cfg, batch_size) -> dict[str, float]:
    """Loss over a full split in eval mode (no dropout, no gradients)."""
    model.eval()
    n = tensors["static"].shape[0]
    totals = {"l_prob": 0.0, "l_quantile": 0.0, "l_total": 0.0}
    with torch.no_grad():
        for start in range(0, n, batch_size):
            sl = slice(start, min(start + batch_size, n))
            out = model(tensors["static"][sl], tensors["weather"][sl])
            breakdown = composite_loss(
                tensors["trigger_targets"][sl], tensors["target_loads"][sl], out, loss_cfg
            )
            size = sl.stop - sl.start
            for key in totals:
                totals[key] += float(getattr(breakdown, key)) * size
    return {key: value / n for key, value in totals.items()}


@dataclass
class TrainResult:
    log: list[TrainLogEntry]
    best_epoch: int
    best_val: float | None
    checkpoint_last: Path | None
    checkpoint_best: Path | None
    model: torch.nn.Module = field(repr=False, default=None)


def train_model(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    train_windows: list[SampleWindow],
    val_windows: list[SampleWindow],
    stats: NormalizationStats,
    out_dir=None,
    log_file=None,
    resume_from=None,
    progress=None,
) -> TrainResult:
    """Train one model; writes per-epoch JSON-line logs and best/last checkpoints.

    `resume_from` continues an interrupted run: configs must match the
    checkpoint exactly, and the continuation is identical to an uninterrupted
    run with the same seed.
    """
    if not train_windows:
        raise ValueError("train split is empty")
    loss_cfg = LossConfig(
        quantiles=model_cfg.quantiles, trigger_weighting=train_cfg.trigger_weighting
    )
    torch.manual_seed(train_cfg.seed)
    model = build_model(model_cfg, train_cfg.model_kind)
    optimizer = AdamW(
        list(model.named_parameters()),
        lr=train_cfg.learning_rate,
        betas=(train_cfg.beta1, train_cfg.beta2),
        eps=train_cfg.eps,
        weight_decay=train_cfg.weight_decay,
    )
    start_epoch = 1
    best_val = None
    best_epoch = 0
    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        if ckpt.model_cfg != model_cfg or ckpt.model_kind != train_cfg.model_kind:
            raise CheckpointError(
                "checkpoint was trained with a different model configuration; refusing to resume"
            )
        stored = {k: v for k, v in ckpt.train_cfg.to_dict().items() if k != "epochs"}
        requested = {k: v for k, v in train_cfg.to_dict().items() if k != "epochs"}
        if stored != requested:
            raise CheckpointError(
                "checkpoint was trained with a different training configuration; refusing to resume"
            )
        model.load_state_dict(ckpt.state_dict)
        if ckpt.optimizer_state is not None:
            optimizer.load_state_dict(ckpt.optimizer_state)
        torch.set_rng_state(ckpt.torch_rng_state)
        start_epoch = ckpt.epoch + 1
        best_val = ckpt.best_val
        best_epoch = ckpt.best_epoch

    train_tensors = _to_tensors(train_windows)
    val_tensors = _to_tensors(val_windows) if val_windows else None
    if val_tensors is None:
        warnings.warn("validation split is empty; best checkpoint tracks train loss", stacklevel=2)

    out_dir = Path(out_dir) if out_dir is not None else None
    path_last = out_dir / "checkpoint_last.pt" if out_dir else None
    path_best = out_dir / "checkpoint_best.pt" if out_dir else None
    log_fh = open(log_file, "a") if log_file is not None else None

    n = train_tensors["static"].shape[0]
    entries: list[TrainLogEntry] = []
    try:
        for epoch in range(start_epoch, train_cfg.epochs + 1):
            tic = time.perf_counter()
            model.train()
            perm = torch.from_numpy(_epoch_permutation(train_cfg.seed, epoch, n))
            totals = {"l_prob": 0.0, "l_quantile": 0.0, "l_total": 0.0}
            for batch_idx, start in enumerate(range(0, n, train_cfg.batch_size)):
                idx = perm[start : start + train_cfg.batch_size]
                try:
                    out = model(
                        train_tensors["static"][idx], train_tensors["weather"][idx]
                    )
                    breakdown = composite_loss(
                        train_tensors["trigger_targets"][idx],
                        train_tensors["target_loads"][idx],
                        out,
                        loss_cfg,
                    )
                except RuntimeError as exc:
                    if "non-finite" in str(exc):
                        raise TrainingDivergedError(
                            f"diverged at epoch {epoch}, batch {batch_idx}: {exc}"
                        ) from exc
                    raise
                if not torch.isfinite(breakdown.l_total):
                    raise TrainingDivergedError(
                        f"non-finite loss at epoch {epoch}, batch {batch_idx}"
                    )
                optimizer.zero_grad()
                breakdown.l_total.backward()
                if train_cfg.grad_clip_norm is not None:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), train_cfg.grad_clip_norm)
                optimizer.step()
                size = len(idx)
                for key in totals:
                    totals[key] += float(getattr(breakdown, key).detach()) * size
            wall = time.perf_counter() - tic
            train_entry = TrainLogEntry(
                epoch=epoch, split="train", mode="train",
                l_prob=totals["l_prob"] / n, l_quantile=totals["l_quantile"] / n,
                l_total=totals["l_total"] / n, wall_time=wall,
            )
            entries.append(train_entry)
            selection_metric = train_entry.l_total
            if val_tensors is not None:
                tic = time.perf_counter()
                val = _run_split(model, val_tensors, loss_cfg, train_cfg.batch_size)
                entries.append(
                    TrainLogEntry(
                        epoch=epoch, split="val", mode="eval",
                        l_prob=val["l_prob"], l_quantile=val["l_quantile"],
                        l_total=val["l_total"], wall_time=time.perf_counter() - tic,
                    )
                )
                selection_metric = val["l_total"]
            if log_fh is not None:
                for entry in entries[-2 if val_tensors is not None else -1 :]:
                    log_fh.write(entry.to_json() + "\n")
                log_fh.flush()
            if progress is not None:
                progress(entries[-1])
            if best_val is None or selection_metric < best_val:
                best_val = selection_metric
                best_epoch = epoch
                if path_best is not None:
                    save_checkpoint(
                        path_best, model, model_cfg, train_cfg.model_kind, stats,
                        train_cfg, optimizer, epoch, best_val, best_epoch,
                    )
            if path_last is not None:
                save_checkpoint(
                    path_last, model, model_cfg, train_cfg.model_kind, stats,
                    train_cfg, optimizer, epoch, best_val, best_epoch,
                )
    finally:
        if log_fh is not None:
            log_fh.close()
    model.eval()
    return TrainResult(
        log=entries,
        best_epoch=best_epoch,
        best_val=best_val,
        checkpoint_last=path_last,
        checkpoint_best=path_best,
        model=model,
    )
