"""SGD with momentum, the warmup/step learning-rate schedule, and the
data -> model -> loss -> update loop."""
from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Collection

import numpy as np

from .data import PKSampler, SynthData, make_batch, rng_for
from .evaluation import evaluate
from .losses import LossWeights, total_loss
from .modules import BackboneConfig, FDNMModel
from .numerics.params import ParamStore, read_checkpoint, write_checkpoint
from .numerics.tensor import Tensor

log = logging.getLogger(__name__)

METRIC_FIELDS = ("epoch", "lr", "loss_total", "loss_id", "loss_tri", "loss_cnm", "rank1", "mAP")


@dataclass
class TrainConfig:
    epochs: int = 150
    warmup_epochs: int = 10
    init_lr: float = 1e-2
    base_lr: float = 1e-1
    milestones: tuple[int, ...] = (20, 80, 120)
    decay_lrs: tuple[float, ...] = (1e-2, 1e-3, 1e-4)
    momentum: float = 0.9
    weight_decay: float = 0.0
    grad_clip: float = 0.0
    batch_p: int = 6
    batch_k: int = 4
    weights: LossWeights = field(default_factory=LossWeights)
    use_agp: bool = True
    use_anm: bool = True
    use_cnm: bool = True
    use_local: bool = True
    ordered_pairs: bool = True
    flip: bool = True
    precision: str = "float32"
    eval_every: int = 5
    checkpoint_every: int = 5
    seed: int = 0

    def __post_init__(self):
        ms = list(self.milestones)
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ValueError(f"milestones must be strictly increasing, got {ms}")
        if len(self.decay_lrs) != len(ms):
            raise ValueError("decay_lrs needs one value per milestone")
        if min([self.init_lr, self.base_lr, *self.decay_lrs]) <= 0:
            raise ValueError("learning rates must be positive")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"precision must be float32 or float64, got {self.precision!r}")

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """30-epoch schedule with warmup and milestones scaled by 30/150.

        Adds gradient clipping: the short warmup meets the nuances-mining
        gradient while it is still far larger than the others.
        """
        base = dict(epochs=30, warmup_epochs=2, milestones=(4, 16, 24), grad_clip=2.0)
        base.update(overrides)
        return cls(**base)

    @property
    def dtype(self):
        return np.dtype(self.precision)


def lr_at(epoch: int, cfg: TrainConfig | None = None) -> float:
    cfg = cfg or TrainConfig()
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    if epoch < cfg.warmup_epochs:
        return cfg.init_lr + (cfg.base_lr - cfg.init_lr) * epoch / cfg.warmup_epochs
    lr = cfg.base_lr
    for milestone, value in zip(cfg.milestones, cfg.decay_lrs):
        if epoch >= milestone:
            lr = value
    return lr


@dataclass
class OptimState:
    momentum: float = 0.9
    lr: float = 0.1
    weight_decay: float = 0.0
    velocity: dict[str, np.ndarray] = field(default_factory=dict)


def sgd_step(params: ParamStore, opt: OptimState, inert: Collection[str] = ()) -> None:
    """``v = mu*v + g``; ``w = w - lr*v``; then clear grads.

    Names in ``inert`` belong to parts no active loss reaches; their missing
    gradient counts as zero. Any other missing gradient is an error.
    """
    for name, t in params.items():
        if t.grad is None and name not in inert:
            raise RuntimeError(f"parameter {name!r} has no gradient")
    for name, t in params.items():
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        if opt.weight_decay:
            g = g + opt.weight_decay * t.data
        v = opt.velocity.get(name)
        v = g.copy() if v is None else opt.momentum * v + g
        opt.velocity[name] = v
        t.data = t.data - opt.lr * v
        t.grad = None


def clip_grad_norm(params: ParamStore, max_norm: float) -> float:
    """Rescale all grads so their joint L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float(np.sum(t.grad.astype(np.float64) ** 2))
                          for t in params.values() if t.grad is not None))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for t in params.values():
            if t.grad is not None:
                t.grad = t.grad * np.asarray(scale, dtype=t.grad.dtype)
    return total


class TrainingDiverged(RuntimeError):
    pass


def build_model(backbone: BackboneConfig, cfg: TrainConfig, num_classes: int) -> FDNMModel:
    bb = replace(
        backbone,
        agp_after=tuple(backbone.agp_after) if cfg.use_agp else (),
        use_anm=cfg.use_anm,
        use_local=cfg.use_local,
    )
    return FDNMModel(bb, num_classes, seed=cfg.seed, dtype=cfg.dtype)


def inert_params(model: FDNMModel, cfg: TrainConfig) -> set[str]:
    """ANM only feeds the nuances-mining loss; without it the branch is inert."""
    if model.anm is None or cfg.use_cnm:
        return set()
    return {n for n in model.params if n.startswith("anm.")}


def checkpoint_arrays(model: FDNMModel, opt: OptimState, epoch: int) -> dict[str, np.ndarray]:
    out = model.state_arrays()
    for name in model.params:
        if name in opt.velocity:
            out[f"optim.{name}"] = opt.velocity[name]
    out["meta.epoch"] = np.array([epoch], dtype=np.float32)
    return out


def restore(model: FDNMModel, opt: OptimState, arrays) -> int:
    model.load_state_arrays(arrays)
    opt.velocity = {
        name: np.asarray(arrays[f"optim.{name}"], dtype=model.dtype).copy()
        for name in model.params if f"optim.{name}" in arrays
    }
    return int(arrays["meta.epoch"][0])


@dataclass
class TrainResult:
    model: FDNMModel
    history: list[dict]
    step_losses: list[dict]


def _fmt(v) -> str:
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(float(v))
    return str(v)


def train(
    cfg: TrainConfig,
    backbone: BackboneConfig,
    data: SynthData,
    out_dir: str | os.PathLike | None = None,
    resume: str | os.PathLike | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Run the full schedule; writes metrics.csv and epoch_%04d.fdnm if out_dir is set.

    Every random draw is keyed by (seed, epoch, step), so resuming from a
    checkpoint reproduces the uninterrupted run.
    """
    train_set = data.train
    model = build_model(backbone, cfg, train_set.num_classes)
    backbone_cfg = model.cfg
    backbone_cfg.validate(train_set.images.shape[-2], train_set.images.shape[-1])
    opt = OptimState(cfg.momentum, lr_at(0, cfg), cfg.weight_decay)
    sampler = PKSampler(train_set, cfg.batch_p, cfg.batch_k, cfg.seed)
    out = Path(out_dir) if out_dir is not None else None
    history: list[dict] = []
    step_losses: list[dict] = []
    start = 0
    if resume is not None:
        start = restore(model, opt, read_checkpoint(resume)) + 1
        metrics_path = Path(resume).parent / "metrics.csv"
        if metrics_path.exists():
            with open(metrics_path, newline="") as fh:
                history = [row for row in csv.DictReader(fh) if int(row["epoch"]) < start]
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        if resume is None:
            write_checkpoint(out / "epoch_0000.fdnm", checkpoint_arrays(model, opt, -1))

    dtype = cfg.dtype
    inert = inert_params(model, cfg)
    for epoch in range(start, cfg.epochs):
        opt.lr = lr_at(epoch, cfg)
        sums = {"total": 0.0, "id": 0.0, "tri": 0.0, "cnm": 0.0}
        batches = sampler.epoch(epoch)
        for step, idx in enumerate(batches):
            aug = rng_for(cfg.seed, "augment", epoch, step) if cfg.flip else None
            batch = make_batch(train_set, idx, aug)
            images = Tensor(batch.images.astype(dtype), dtype=dtype)
            output = model.forward(images, batch.modalities, training=True)
            losses = total_loss(output, batch.labels, batch.modalities, cfg.weights,
                                use_cnm=cfg.use_cnm, ordered_pairs=cfg.ordered_pairs)
            parts = losses.as_floats()
            if not all(math.isfinite(v) for v in parts.values()):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch} step {step}: {parts}")
            losses.total.backward()
            if cfg.grad_clip:
                clip_grad_norm(model.params, cfg.grad_clip)
            sgd_step(model.params, opt, inert)
            step_losses.append({"epoch": epoch, "step": step, **parts})
            for k in sums:
                sums[k] += parts[k]
        n = max(len(batches), 1)
        row = {"epoch": epoch, "lr": opt.lr,
               **{f"loss_{k}": v / n for k, v in sums.items()},
               "rank1": float("nan"), "mAP": float("nan")}
        last = epoch == cfg.epochs - 1
        if (cfg.eval_every and (epoch + 1) % cfg.eval_every == 0) or last:
            report = evaluate(model, data.test)
            row["rank1"], row["mAP"] = report.result.rank(1), report.result.mAP
        history.append(row)
        log.info("epoch %d lr %.4g loss %.4f rank1 %s mAP %s", epoch, opt.lr,
                 row["loss_total"], _fmt(row["rank1"]), _fmt(row["mAP"]))
        if on_epoch is not None:
            on_epoch(row)
        if out is not None:
            if (cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0) or last:
                write_checkpoint(out / f"epoch_{epoch + 1:04d}.fdnm",
                                 checkpoint_arrays(model, opt, epoch))
            _write_metrics(out / "metrics.csv", history)
    return TrainResult(model, history, step_losses)


def _write_metrics(path: Path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter=",", lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for row in history:
            w.writerow([_fmt(_coerce(row[k])) for k in METRIC_FIELDS])


def _coerce(v):
    if isinstance(v, str):
        if v == "":
            return float("nan")
        try:
            return int(v)
        except ValueError:
            return float(v)
    if isinstance(v, (np.floating,)):
        return float(v)
    return v


def sweep(
    cfg: TrainConfig,
    backbone: BackboneConfig,
    data: SynthData,
    lambda2s=(0.0, 0.25, 0.5, 1.0),
    margins=(0.0, 0.2, 0.5),
    out_dir: str | os.PathLike | None = None,
) -> list[dict]:
    """Train one model per (lambda2, m) cell with a shared seed."""
    if not lambda2s or not margins:
        raise ValueError("sweep grid is empty")
    rows = []
    for lam in lambda2s:
        for m in margins:
            cell = replace(cfg, weights=replace(cfg.weights, lambda2=lam, margin_cnm=m),
                           eval_every=0, checkpoint_every=0)
            res = train(cell, backbone, data)
            final = res.history[-1]
            rows.append({"lambda2": lam, "margin_cnm": m,
                         "rank1": float(final["rank1"]), "mAP": float(final["mAP"])})
            log.info("sweep lambda2=%g m=%g rank1=%.4f mAP=%.4f", lam, m,
                     rows[-1]["rank1"], rows[-1]["mAP"])
    if out_dir is not None:
        path = Path(out_dir)
        path.mkdir(parents=True, exist_ok=True)
        with open(path / "sweep.csv", "w", newline="") as fh:
            w = csv.writer(fh, delimiter=",", lineterminator="\n")
            w.writerow(("lambda2", "margin_cnm", "rank1", "mAP"))
            for r in rows:
                w.writerow((repr(r["lambda2"]), repr(r["margin_cnm"]),
                            f"{r['rank1']:.6f}", f"{r['mAP']:.6f}"))
    return rows
