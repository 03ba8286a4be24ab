"""Adversarial training loop with the embedding-space robustness objective,
per-epoch PGD validation, best/last checkpointing and export."""

import copy
import csv
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .attacks import AttackSpec, pgd, pgd_spec
from .data import BatchPlan, LabeledImages, augment, make_batches
from .embedding import EmbeddingConfig, EmbeddingSpace
from .evaluation import accuracy, robust_accuracy
from .losses import LossParams, accuracy_loss, robustness_loss
from .models import build_model, split_model
from .scalarization import ScalarizationParams, conic_scalarize, reference_violations

logger = logging.getLogger(__name__)

METHODS = ("morel-t", "morel-m", "trades", "mart", "natural")
CHECKPOINT_FORMAT = "morel-checkpoint"
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


def _default_train_attack():
    return AttackSpec("pgd", 8 / 255, 2 / 255, 10, True, "ce")


def _default_eval_attack():
    return pgd_spec(20, 8 / 255)


@dataclass
class TrainConfig:
    method: str = "morel-t"
    epochs: int = 100
    batch_size: int = 8
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_milestones: Tuple[int, ...] = (75, 90)
    lr_factor: float = 0.01
    train_attack: AttackSpec = field(default_factory=_default_train_attack)
    eval_attack: AttackSpec = field(default_factory=_default_eval_attack)
    loss: LossParams = field(default_factory=LossParams)
    scalarization: ScalarizationParams = field(default_factory=ScalarizationParams)
    embed_dim: int = 128
    heads: int = 2
    arch: str = "small_cnn"
    model_kwargs: dict = field(default_factory=dict)
    seed: int = 0
    augment: bool = True
    attack_bn_train: bool = True
    eval_subsample: int = 0
    eval_batch_size: int = 256

    def __post_init__(self):
        self.lr_milestones = tuple(int(m) for m in self.lr_milestones)
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        ms = self.lr_milestones
        if any(b <= a for a, b in zip(ms, ms[1:])) or any(m >= self.epochs or m < 0 for m in ms):
            raise ValueError(f"lr_milestones must be strictly increasing and within [0, {self.epochs})")

    @property
    def uses_embedding(self) -> bool:
        return self.method.startswith("morel")

    @property
    def adversarial(self) -> bool:
        return self.method != "natural"

    def to_dict(self):
        d = asdict(self)
        d["lr_milestones"] = list(self.lr_milestones)
        d["scalarization"] = self.scalarization.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["train_attack"] = AttackSpec.from_dict(d["train_attack"])
        d["eval_attack"] = AttackSpec.from_dict(d["eval_attack"])
        d["loss"] = LossParams(**d["loss"])
        d["scalarization"] = ScalarizationParams.from_dict(d["scalarization"])
        return cls(**d)


def subsystem_seeds(seed: int):
    """Fan one root seed out to (data, attack, init, augment) seeds."""
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(4)]


def _epoch_generator(seed, epoch):
    return torch.Generator().manual_seed(int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0]))


def lr_at_epoch(epoch: int, config: TrainConfig) -> float:
    """Initial lr times lr_factor per milestone reached; epochs are 0-based."""
    passed = sum(1 for m in config.lr_milestones if epoch >= m)
    return config.lr * config.lr_factor ** passed


def rescale_milestones(milestones, old_epochs: int, new_epochs: int) -> Tuple[int, ...]:
    """Map decay epochs onto a run of a different length, e.g. (75, 90)/100 -> (8, 9)/10."""
    scaled = {math.ceil(m * new_epochs / old_epochs) for m in milestones}
    return tuple(sorted(m for m in scaled if m < new_epochs))


@dataclass
class TrainState:
    config: TrainConfig
    model: nn.Module
    embedding: Optional[EmbeddingSpace]
    optimizer: torch.optim.Optimizer
    model_spec: dict
    epoch: int = 0
    best_metric: float = -1.0
    best_epoch: int = -1
    history: List[dict] = field(default_factory=list)
    eval_history: List[dict] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def parameters(self):
        params = list(self.model.parameters())
        if self.embedding is not None:
            params += list(self.embedding.parameters())
        return params


def _make_optimizer(params, config):
    return torch.optim.SGD(params, lr=config.lr, momentum=config.momentum, weight_decay=config.weight_decay)


def init_state(config: TrainConfig, num_classes: int, in_channels: int = 3) -> TrainState:
    _, _, init_seed, _ = subsystem_seeds(config.seed)
    torch.manual_seed(init_seed)
    model_spec = {"arch": config.arch, "num_classes": num_classes, "in_channels": in_channels,
                  "kwargs": dict(config.model_kwargs)}
    model = _build(model_spec)
    embedding = None
    if config.uses_embedding:
        embedding = EmbeddingSpace(EmbeddingConfig(model.feature_dim, config.embed_dim, config.heads))
    params = list(model.parameters()) + (list(embedding.parameters()) if embedding is not None else [])
    return TrainState(config, model, embedding, _make_optimizer(params, config), model_spec)


def _build(model_spec):
    kwargs = dict(model_spec["kwargs"])
    if model_spec["arch"] == "small_cnn":
        kwargs["in_channels"] = model_spec["in_channels"]
    return build_model(model_spec["arch"], model_spec["num_classes"], **kwargs)


def train_step(batch, state: TrainState, generator: Optional[torch.Generator] = None, batch_index: int = 0):
    """One optimizer step; returns {"L1", "L2", "scalarized"} as floats."""
    config, model = state.config, state.model
    x, y = batch
    if config.adversarial:
        x_adv = pgd(model, x, y, config.train_attack, generator, bn_train=config.attack_bn_train)
    model.train()
    if state.embedding is not None:
        state.embedding.train()

    if not config.adversarial:
        l2 = F.cross_entropy(model(x), y)
        l1 = torch.zeros(())
        objective = l2
    else:
        encoder, head = split_model(model)
        z, z_adv = encoder(x), encoder(x_adv)
        l2 = accuracy_loss(head(z), head(z_adv), y, config.loss)
        if state.embedding is not None:
            t, t_adv = state.embedding(z, z_adv, y)
            l1 = robustness_loss(t, t_adv, y, config.loss)[0]
            objective = conic_scalarize([l1, l2], config.scalarization)
        else:
            l1 = torch.zeros(())
            objective = l2

    values = {"L1": l1.item(), "L2": l2.item(), "scalarized": objective.item()}
    if not all(math.isfinite(v) for v in values.values()):
        raise TrainingError(f"non-finite loss at batch {batch_index}: {values}")
    state.optimizer.zero_grad(set_to_none=True)
    objective.backward()
    state.optimizer.step()
    return values


def _evaluate_epoch(state: TrainState, val_data: LabeledImages, epoch: int):
    config = state.config
    data = val_data
    if config.eval_subsample and config.eval_subsample < len(val_data):
        data = val_data.subsample(config.eval_subsample, seed=config.seed)
    clean = accuracy(state.model, data, config.eval_batch_size)
    robust = robust_accuracy(state.model, data, config.eval_attack, config.eval_batch_size, seed=config.seed)
    return {"epoch": epoch, "clean_acc": clean, "robust_acc": robust, "subsampled": len(data) < len(val_data)}


def fit(config: TrainConfig, train_data: LabeledImages, val_data: LabeledImages,
        out_dir: Optional[str] = None, state: Optional[TrainState] = None,
        stop_after: Optional[int] = None) -> TrainState:
    """Train for config.epochs (or until epoch `stop_after`), evaluating PGD robust accuracy each epoch.

    Writes best.pt / last.pt and history files into out_dir when given;
    pass a loaded `state` to resume.
    """
    if state is None:
        state = init_state(config, train_data.class_count, train_data.images.shape[1])
    data_seed, attack_seed, _, augment_seed = subsystem_seeds(config.seed)
    plan = BatchPlan(config.batch_size, shuffle=True, seed=data_seed)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    end = config.epochs if stop_after is None else min(stop_after, config.epochs)
    device = next(state.model.parameters()).device

    for epoch in range(state.epoch, end):
        lr = lr_at_epoch(epoch, config)
        for group in state.optimizer.param_groups:
            group["lr"] = lr
        attack_gen = _epoch_generator(attack_seed, epoch)
        augment_gen = _epoch_generator(augment_seed, epoch)
        flagged = False
        for i, (x, y) in enumerate(make_batches(train_data, plan, epoch)):
            if config.augment:
                x = augment(x, augment_gen)
            x, y = x.to(device), y.to(device)
            metrics = train_step((x, y), state, attack_gen, i)
            state.history.append({"epoch": epoch, "step": i, **metrics, "lr": lr})
            if config.uses_embedding and not flagged:
                bad = reference_violations([metrics["L1"], metrics["L2"]], config.scalarization)
                if bad:
                    flagged = True
                    logger.warning("epoch %d: reference point not below losses for objectives %s", epoch, bad)

        record = _evaluate_epoch(state, val_data, epoch)
        state.eval_history.append(record)
        state.epoch = epoch + 1
        logger.info("epoch %d lr %.2e clean %.2f robust %.2f", epoch, lr, record["clean_acc"], record["robust_acc"])
        improved = record["robust_acc"] > state.best_metric
        if improved:
            state.best_metric, state.best_epoch = record["robust_acc"], epoch
        if out_dir:
            if improved:
                save_checkpoint(state, os.path.join(out_dir, "best.pt"))
            save_checkpoint(state, os.path.join(out_dir, "last.pt"))
            write_history(state, out_dir)
    return state


HISTORY_FIELDS = ["epoch", "step", "L1", "L2", "scalarized", "lr"]
EVAL_FIELDS = ["epoch", "clean_acc", "robust_acc", "subsampled"]


def write_history(state: TrainState, out_dir):
    for name, rows, fields_ in (("history.csv", state.history, HISTORY_FIELDS),
                                ("epochs.csv", state.eval_history, EVAL_FIELDS)):
        with open(os.path.join(out_dir, name), "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=fields_)
            writer.writeheader()
            for row in rows:
                writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def save_checkpoint(state: TrainState, path, export=False):
    """Versioned container: model/, embedding/, optimizer/ namespaces plus bookkeeping.

    With export=True only the model namespace (encoder + head) is written.
    """
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": "export" if export else "train",
        "model_spec": state.model_spec,
        "model": state.model.state_dict(),
        "config": state.config.to_dict(),
        "extra": state.extra,
    }
    if not export:
        payload.update({
            "embedding": None if state.embedding is None else state.embedding.state_dict(),
            "optimizer": state.optimizer.state_dict(),
            "epoch": state.epoch,
            "best_metric": state.best_metric,
            "best_epoch": state.best_epoch,
            "history": state.history,
            "eval_history": state.eval_history,
        })
    tmp = f"{path}.tmp"
    try:
        torch.save(payload, tmp)
        os.replace(tmp, path)
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from exc


def _read(path):
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a checkpoint file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path} has version {payload.get('version')}, expected {CHECKPOINT_VERSION}")
    return payload


def load_model(path) -> Tuple[nn.Module, dict]:
    """Rebuild the classifier from a training or export checkpoint."""
    payload = _read(path)
    model = _build(payload["model_spec"])
    model.load_state_dict(payload["model"])
    model.eval()
    return model, payload


def load_checkpoint(path) -> TrainState:
    payload = _read(path)
    if payload["kind"] != "train":
        raise CheckpointError(f"{path} is an export file; it holds no training state")
    config = TrainConfig.from_dict(payload["config"])
    model = _build(payload["model_spec"])
    model.load_state_dict(payload["model"])
    embedding = None
    if payload["embedding"] is not None:
        embedding = EmbeddingSpace(EmbeddingConfig(model.feature_dim, config.embed_dim, config.heads))
        embedding.load_state_dict(payload["embedding"])
    params = list(model.parameters()) + (list(embedding.parameters()) if embedding is not None else [])
    optimizer = _make_optimizer(params, config)
    optimizer.load_state_dict(payload["optimizer"])
    return TrainState(config, model, embedding, optimizer, payload["model_spec"], payload["epoch"],
                      payload["best_metric"], payload["best_epoch"], list(payload["history"]),
                      list(payload["eval_history"]), payload.get("extra", {}))


def export_model(checkpoint_path, out_path):
    """Write an inference-only file: the classifier without embedding or optimizer state."""
    payload = _read(checkpoint_path)
    model = _build(payload["model_spec"])
    model.load_state_dict(payload["model"])
    config = TrainConfig.from_dict(payload["config"])
    state = TrainState(config, model, None, _make_optimizer(model.parameters(), config), payload["model_spec"],
                       extra=payload.get("extra", {}))
    save_checkpoint(state, out_path, export=True)
    return out_path


def snapshot(model: nn.Module):
    return copy.deepcopy(model.state_dict())
