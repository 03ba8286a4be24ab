"""l-infinity bounded white-box attacks: FGSM, PGD and a projected CW-margin attack.

All attacks work in raw pixel space [0, 1] and are non-targeted.
"""

import os
from contextlib import contextmanager
from dataclasses import asdict, dataclass, fields
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import clamp_to_domain

FAMILIES = ("fgsm", "pgd", "cw_linf")
INNER_LOSSES = ("ce", "kl", "margin")


@dataclass
class AttackSpec:
    family: str = "pgd"
    epsilon: float = 8 / 255
    step_size: float = 2 / 255
    iterations: int = 10
    random_start: bool = True
    inner_loss: str = "ce"
    confidence: float = 1.0
    c_const: float = 15.0
    lr: float = 1e-2

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown attack family {self.family!r}")
        if self.inner_loss not in INNER_LOSSES:
            raise ValueError(f"unknown inner loss {self.inner_loss!r}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.step_size < 0:
            raise ValueError("step_size must be >= 0")
        if self.lr <= 0 or self.c_const <= 0:
            raise ValueError("lr and c_const must be > 0")
        if self.confidence < 0:
            raise ValueError("confidence must be >= 0")

    @property
    def name(self) -> str:
        if self.family == "fgsm":
            return "FGSM"
        if self.family == "pgd":
            return f"PGD-{self.iterations}"
        return "CW_inf"

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown attack keys: {sorted(unknown)}")
        return cls(**d)


def fgsm_spec(epsilon=8 / 255):
    return AttackSpec("fgsm", epsilon, epsilon, 1, False)


def pgd_spec(iterations, epsilon=8 / 255, step_size=None, random_start=False, inner_loss="ce"):
    step = epsilon / 10 if step_size is None else step_size
    return AttackSpec("pgd", epsilon, step, iterations, random_start, inner_loss)


def cw_spec(epsilon=8 / 255, iterations=10, lr=1e-2, confidence=1.0, c_const=15.0):
    return AttackSpec("cw_linf", epsilon, epsilon / 10, iterations, False,
                      "margin", confidence, c_const, lr)


def project_linf(x_adv: torch.Tensor, x_ref: torch.Tensor, epsilon: float) -> torch.Tensor:
    if x_adv.shape != x_ref.shape:
        raise ValueError(f"shape mismatch: {tuple(x_adv.shape)} vs {tuple(x_ref.shape)}")
    return clamp_to_domain(torch.min(torch.max(x_adv, x_ref - epsilon), x_ref + epsilon))


def margin(logits: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Per-sample logit_y - max_{j != y} logit_j."""
    true = logits.gather(1, y[:, None]).squeeze(1)
    others = logits.masked_fill(F.one_hot(y, logits.shape[1]).bool(), float("-inf"))
    return true - others.max(dim=1).values


def inner_objective(logits, y, kind, ref_logits=None):
    """Summed per-sample objective the attacker ascends."""
    if kind == "ce":
        return F.cross_entropy(logits, y, reduction="sum")
    if kind == "kl":
        ref = F.log_softmax(ref_logits, dim=1)
        return (ref.exp() * (ref - F.log_softmax(logits, dim=1))).sum()
    if kind == "margin":
        return -margin(logits, y).sum()
    raise ValueError(f"unknown inner loss {kind!r}")


def input_gradient(model: nn.Module, x: torch.Tensor, y: torch.Tensor, kind="ce", ref_logits=None) -> torch.Tensor:
    x = x.detach().requires_grad_(True)
    with torch.enable_grad():
        loss = inner_objective(model(x), y, kind, ref_logits)
        (grad,) = torch.autograd.grad(loss, [x])
    return grad.detach()


@contextmanager
def attack_mode(model: nn.Module, bn_train: bool = False):
    """Put `model` in eval (or batch-stat) mode without touching parameters or running stats."""
    was_training = model.training
    bns = [m for m in model.modules() if isinstance(m, nn.modules.batchnorm._BatchNorm)]
    saved = [(m.momentum, None if m.num_batches_tracked is None else m.num_batches_tracked.clone()) for m in bns]
    model.train(bn_train)
    for m in bns:
        m.momentum = 0.0
    try:
        yield model
    finally:
        for m, (momentum, tracked) in zip(bns, saved):
            m.momentum = momentum
            if tracked is not None:
                m.num_batches_tracked.copy_(tracked)
        model.train(was_training)


def _checked(x_adv, x, epsilon):
    if os.environ.get("MOREL_CHECK_ATTACKS") == "1":
        gap = (x_adv - x).abs().max().item() if x.numel() else 0.0
        assert gap <= epsilon + 1e-6, f"attack left the eps-ball: {gap} > {epsilon}"
        assert x_adv.min() >= 0 and x_adv.max() <= 1, "attack left the pixel domain"
    return x_adv


def _signed_step(model, x_cur, x, y, step, epsilon, kind, ref_logits):
    grad = input_gradient(model, x_cur, y, kind, ref_logits)
    return project_linf(x_cur + step * grad.sign(), x, epsilon)


def _reference_logits(model, x, kind):
    if kind != "kl":
        return None
    with torch.no_grad():
        return model(x)


def fgsm(model, x, y, epsilon, inner_loss="ce", bn_train=False):
    x = x.detach()
    with attack_mode(model, bn_train):
        ref = _reference_logits(model, x, inner_loss)
        x_adv = _signed_step(model, x, x, y, epsilon, epsilon, inner_loss, ref)
    return _checked(x_adv, x, epsilon)


def pgd(model, x, y, spec: AttackSpec, generator: Optional[torch.Generator] = None, bn_train=False):
    x = x.detach()
    eps = spec.epsilon
    with attack_mode(model, bn_train):
        ref = _reference_logits(model, x, spec.inner_loss)
        x_adv = x
        if spec.random_start:
            noise = torch.rand(x.shape, generator=generator, dtype=x.dtype).to(x.device)
            x_adv = project_linf(x + (2 * noise - 1) * eps, x, eps)
        for _ in range(spec.iterations):
            x_adv = _signed_step(model, x_adv, x, y, spec.step_size, eps, spec.inner_loss, ref)
    return _checked(x_adv, x, eps)


def cw_linf(model, x, y, spec: AttackSpec, bn_train=False):
    """Projected gradient descent on c * max(margin + kappa, 0)."""
    x = x.detach()
    eps = spec.epsilon
    with attack_mode(model, bn_train):
        x_adv = x
        for _ in range(spec.iterations):
            x_var = x_adv.detach().requires_grad_(True)
            with torch.enable_grad():
                hinge = F.relu(margin(model(x_var), y) + spec.confidence)
                (grad,) = torch.autograd.grad(spec.c_const * hinge.sum(), [x_var])
            x_adv = project_linf(x_adv - spec.lr * grad, x, eps)
    return _checked(x_adv, x, eps)


def run_attack(model, x, y, spec: AttackSpec, generator=None, bn_train=False):
    if spec.family == "fgsm":
        return fgsm(model, x, y, spec.epsilon, spec.inner_loss, bn_train)
    if spec.family == "pgd":
        return pgd(model, x, y, spec, generator, bn_train)
    return cw_linf(model, x, y, spec, bn_train)
