"""Loss, learning-rate schedule, training loop with checkpoints, evaluation."""
from __future__ import annotations

import json
import logging
import math
import random
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from .blocks import ConfigError
from .cache import FeatureCache
from .data import ClassTable, DatasetSplit, Sample
from .features import extract
from .metrics import ConfusionMatrix, report
from .network import ARCH_VERSION, NetworkConfig, SegmentationModel, build_model

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1
EPS = 1e-12


class TrainingAborted(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 4
    lr0: float = 1e-3
    decay_rate: float = 1e-4
    decay_start_epoch: int = 10
    ciw_loss_weighting: bool = True
    background_weight: float = 0.05
    seed: int = 0
    checkpoint_every: int = 10
    deterministic: bool = True
    mask_guided_features: bool = False
    recompute_features: bool = False
    augment: bool = False

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ConfigError("lr0 must be positive")
        if not 0 <= self.decay_rate < 1:
            raise ConfigError("decay_rate must lie in [0, 1)")
        if self.decay_start_epoch < 0:
            raise ConfigError("decay_start_epoch must be non-negative")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")
        if self.augment:
            raise ConfigError("augmentation is not implemented")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainState:
    epoch: int = 0
    step: int = 0
    current_lr: float = 0.0
    best_val_metric: float = -math.inf
    history: list[dict] = field(default_factory=list)
    checkpoint: str | None = None


# --- loss and schedule ------------------------------------------------------

def ce_loss(probs: torch.Tensor, gt: torch.Tensor, weights=None) -> torch.Tensor:
    """Mean over pixels of ``-w[gt] * log(p[gt] + 1e-12)``.

    ``probs`` is (N, K, H, W), ``gt`` (N, H, W) integer class indices.
    """
    if probs.dim() != 4 or gt.shape != (probs.shape[0],) + probs.shape[2:]:
        raise ValueError(f"probs {tuple(probs.shape)} and gt {tuple(gt.shape)} do not align")
    gt = gt.long()
    p = probs.gather(1, gt.unsqueeze(1)).squeeze(1)
    nll = -torch.log(p + EPS)
    if weights is not None:
        w = torch.as_tensor(weights, dtype=probs.dtype, device=probs.device)
        nll = nll * w[gt]
    return nll.mean()


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    if epoch < cfg.decay_start_epoch:
        return cfg.lr0
    return cfg.lr0 * (1 - cfg.decay_rate) ** (epoch - cfg.decay_start_epoch)


def loss_weights(table: ClassTable, cfg: TrainConfig) -> np.ndarray | None:
    if not cfg.ciw_loss_weighting:
        return None
    w = table.ciw.copy()
    w[0] = cfg.background_weight
    return w


# --- determinism -----------------------------------------------------------

def seed_everything(seed: int, deterministic: bool = True) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True)


def _rng_snapshot(shuffle: torch.Generator) -> dict:
    return {
        "torch": torch.get_rng_state(),
        "numpy": np.random.get_state(),
        "python": random.getstate(),
        "shuffle": shuffle.get_state(),
    }


def _rng_restore(snap: dict, shuffle: torch.Generator) -> None:
    torch.set_rng_state(snap["torch"])
    np.random.set_state(snap["numpy"])
    random.setstate(snap["python"])
    shuffle.set_state(snap["shuffle"])


# --- tensors and features ---------------------------------------------------

def images_to_tensor(samples: Sequence[Sample]) -> torch.Tensor:
    return torch.from_numpy(np.stack([s.image for s in samples]).astype(np.float32)).permute(0, 3, 1, 2).contiguous()


def masks_to_tensor(samples: Sequence[Sample]) -> torch.Tensor:
    return torch.from_numpy(np.stack([s.mask for s in samples]).astype(np.int64))


def compute_features(model: SegmentationModel, samples: Sequence[Sample], cache_root=None,
                     mask_guided: bool = False) -> dict[int, torch.Tensor] | None:
    """Feature stacks per injection site, full resolution, (N, C, H, W) float32."""
    plan = model.config.injection_plan
    if not model.injects:
        return None
    params = model.config.extractor_params
    per_set: dict[tuple, torch.Tensor] = {}
    out = {}
    for site in plan.sites:
        ex = plan.extractors_for(site)
        if ex not in per_set:
            cache = FeatureCache(cache_root, ex, params, mask_guided) if cache_root is not None else None
            stacks = []
            for s in samples:
                guide = (s.mask > 0).astype(np.uint8) if mask_guided else None
                if cache is not None:
                    st = cache.get(s.id, s.image, guide)
                else:
                    st = extract(s.image, ex, guide, params)
                stacks.append(st.data.astype(np.float32))
            if cache is not None and samples:
                cache.write_manifest(extract(samples[0].image, ex, None, params).names, [s.id for s in samples])
            per_set[ex] = torch.from_numpy(np.stack(stacks)) if stacks else torch.zeros(0)
        out[site] = per_set[ex]
    return out


def _slice_features(features, idx):
    if features is None:
        return None
    return {k: v[idx] for k, v in features.items()}


@torch.no_grad()
def predict(model: SegmentationModel, images: torch.Tensor, features=None, batch_size: int = 8) -> torch.Tensor:
    """Argmax class map (N, H, W)."""
    model.eval()
    outs = []
    for i in range(0, images.shape[0], batch_size):
        idx = slice(i, i + batch_size)
        outs.append(model(images[idx], _slice_features(features, idx)).argmax(dim=1))
    return torch.cat(outs) if outs else torch.zeros(0, dtype=torch.long)


def evaluate(model: SegmentationModel, samples: Sequence[Sample], table: ClassTable,
             features=None, batch_size: int = 8) -> dict:
    """Metrics report on argmax predictions."""
    if not samples:
        raise ValueError("cannot evaluate on an empty sample set")
    if features is None and model.injects:
        features = compute_features(model, samples)
    pred = predict(model, images_to_tensor(samples), features, batch_size).numpy()
    cm = ConfusionMatrix(table.num_classes)
    for p, s in zip(pred, samples):
        cm.accumulate(p, s.mask)
    return report(cm, table.names, table.ciw)


# --- checkpoints ----------------------------------------------------------------

def save_checkpoint(path, model: SegmentationModel, optimizer=None, state: TrainState | None = None,
                    train_cfg: TrainConfig | None = None, rng: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": CHECKPOINT_FORMAT,
        "arch_version": ARCH_VERSION,
        "network_config": model.config.to_dict(),
        "model_state": model.state_dict(),
        "optimizer_state": optimizer.state_dict() if optimizer is not None else None,
        "train_state": asdict(state) if state is not None else None,
        "train_config": train_cfg.to_dict() if train_cfg is not None else None,
        "rng": rng,
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path) -> dict:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format_version") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path}: unsupported checkpoint format {payload.get('format_version')}")
    if payload.get("arch_version") != ARCH_VERSION:
        raise ConfigError(f"{path}: checkpoint built for architecture v{payload.get('arch_version')}")
    return payload


def model_from_checkpoint(path) -> tuple[SegmentationModel, dict]:
    payload = load_checkpoint(path)
    model = build_model(NetworkConfig.from_dict(payload["network_config"]))
    model.load_state_dict(payload["model_state"])
    return model, payload


# --- training loop ----------------------------------------------------------------

def train(model: SegmentationModel, samples: Sequence[Sample], split: DatasetSplit | None,
          cfg: TrainConfig, table: ClassTable, out_dir=None, resume_from=None,
          cache_root=None, stop_after: int | None = None) -> TrainState:
    """Adam training with the epoch-wise learning-rate schedule.

    Writes ``train_log.jsonl`` plus ``last.pt``, ``best.pt`` and periodic
    ``epoch_XXXX.pt`` checkpoints under ``out_dir`` when given.
    ``stop_after`` ends the run early after that many epochs in total
    (used to simulate an interrupted run).
    """
    if table.num_classes != model.config.num_classes:
        raise ConfigError(f"class table has {table.num_classes} classes, model {model.config.num_classes}")
    by_id = {s.id: s for s in samples}
    train_ids = split.train if split is not None else list(by_id)
    val_ids = split.val if split is not None else []
    train_s = [by_id[i] for i in train_ids]
    val_s = [by_id[i] for i in val_ids]
    if not train_s:
        raise ValueError("training split is empty")

    # the run owns its randomness (dropout, shuffling); a resume restores it below
    seed_everything(cfg.seed, cfg.deterministic)
    out = Path(out_dir) if out_dir is not None else None
    shuffle = torch.Generator().manual_seed(cfg.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr0, betas=(0.9, 0.999), eps=1e-8)
    state = TrainState()

    if resume_from is not None:
        payload = load_checkpoint(resume_from)
        model.load_state_dict(payload["model_state"])
        optimizer.load_state_dict(payload["optimizer_state"])
        state = TrainState(**payload["train_state"])
        _rng_restore(payload["rng"], shuffle)
        log.info("resumed from %s at epoch %d", resume_from, state.epoch)

    x_train = images_to_tensor(train_s)
    y_train = masks_to_tensor(train_s)
    f_train = compute_features(model, train_s, cache_root, cfg.mask_guided_features)
    f_val = compute_features(model, val_s, cache_root, cfg.mask_guided_features) if val_s else None
    weights = loss_weights(table, cfg)
    w_t = torch.as_tensor(weights, dtype=torch.float32) if weights is not None else None

    last_epoch = cfg.epochs if stop_after is None else min(cfg.epochs, stop_after)
    log_path = out / "train_log.jsonl" if out is not None else None
    if log_path is not None:
        out.mkdir(parents=True, exist_ok=True)
        # a resumed run rewrites the log from its own history so both runs agree
        log_path.write_text("".join(json.dumps(r) + "\n" for r in state.history))

    while state.epoch < last_epoch:
        epoch = state.epoch
        lr = lr_schedule(epoch, cfg)
        for g in optimizer.param_groups:
            g["lr"] = lr
        model.train()
        order = torch.randperm(len(train_s), generator=shuffle)
        total, count = 0.0, 0
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            probs = model(x_train[idx], _slice_features(f_train, idx))
            loss = ce_loss(probs, y_train[idx], w_t)
            if not torch.isfinite(loss):
                if out is not None:
                    save_checkpoint(out / "nan_abort.pt", model, optimizer, state, cfg,
                                    _rng_snapshot(shuffle))
                raise TrainingAborted(f"non-finite loss at epoch {epoch}, step {state.step}")
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            state.step += 1
            total += loss.item() * len(idx)
            count += len(idx)
        record = {"epoch": epoch + 1, "lr": lr, "train_loss": total / count}
        if val_s:
            rep = evaluate(model, val_s, table, f_val)
            record["val"] = {k: rep[k] for k in ("iou_bg", "iou_nobg", "fwiou", "ciw_iou", "f1",
                                                 "balanced_acc", "mcc")}
        state.epoch = epoch + 1
        state.current_lr = lr
        state.history.append(record)
        log.info("epoch %d lr %.6g loss %.5f", state.epoch, lr, record["train_loss"])
        if log_path is not None:
            with open(log_path, "a") as fh:
                fh.write(json.dumps(record) + "\n")
        if out is not None:
            rng = _rng_snapshot(shuffle)
            if val_s and record["val"]["iou_bg"] > state.best_val_metric:
                state.best_val_metric = record["val"]["iou_bg"]
                save_checkpoint(out / "best.pt", model, optimizer, state, cfg, rng)
            if cfg.checkpoint_every and state.epoch % cfg.checkpoint_every == 0:
                save_checkpoint(out / f"epoch_{state.epoch:04d}.pt", model, optimizer, state, cfg, rng)
            state.checkpoint = str(out / "last.pt")
            save_checkpoint(out / "last.pt", model, optimizer, state, cfg, rng)
        elif val_s:
            state.best_val_metric = max(state.best_val_metric, record["val"]["iou_bg"])
    return state
