"""Robustness objective (cosine alignment + multi-positive contrastive) and
accuracy objectives (TRADES, MART). All softmax work is done in log-domain."""

from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F


@dataclass
class LossParams:
    alpha: float = 1e-5
    tau: float = 0.1
    inv_lambda: float = 6.0
    l2_variant: str = "trades"
    # "concat": contrast all 2n natural+adversarial rows; "natural": the n natural rows only
    contrastive_inputs: str = "concat"
    # "nat_adv": KL(natural || adversarial); "adv_nat" swaps the arguments
    kl_direction: str = "nat_adv"

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if self.inv_lambda <= 0:
            raise ValueError("inv_lambda must be > 0")
        if self.l2_variant not in ("trades", "mart"):
            raise ValueError(f"unknown l2_variant {self.l2_variant!r}")
        if self.contrastive_inputs not in ("concat", "natural"):
            raise ValueError(f"unknown contrastive_inputs {self.contrastive_inputs!r}")
        if self.kl_direction not in ("nat_adv", "adv_nat"):
            raise ValueError(f"unknown kl_direction {self.kl_direction!r}")

    def to_dict(self):
        return asdict(self)


def _row_norms(t):
    norms = t.norm(dim=1)
    if bool((norms == 0).any()):
        raise ValueError("zero-norm feature row")
    return norms


def cosine_alignment_loss(t: torch.Tensor, t_adv: torch.Tensor) -> torch.Tensor:
    """1 - mean_i cos(t_i, t'_i); lies in [0, 2]."""
    if t.shape != t_adv.shape:
        raise ValueError(f"shape mismatch: {tuple(t.shape)} vs {tuple(t_adv.shape)}")
    cos = (t * t_adv).sum(dim=1) / (_row_norms(t) * _row_norms(t_adv))
    return 1 - cos.mean()


def multi_positive_contrastive_loss(features: torch.Tensor, labels: torch.Tensor, tau: float,
                                    skip_unpaired: bool = False) -> torch.Tensor:
    """Batch sum over anchors j of -1/|P(j)| * sum_{p in P(j)} log softmax_{q != j}(t_j . t_q / tau)[p].

    With skip_unpaired, anchors with no same-class partner contribute nothing;
    otherwise they are an error.
    """
    n = len(features)
    eye = torch.eye(n, dtype=torch.bool, device=features.device)
    sim = (features @ features.T / tau).masked_fill(eye, float("-inf"))
    log_prob = sim - torch.logsumexp(sim, dim=1, keepdim=True)
    positives = (labels[:, None] == labels[None, :]) & ~eye
    counts = positives.sum(dim=1)
    if not skip_unpaired and bool((counts == 0).any()):
        raise ValueError("an anchor has no positive partner")
    per_anchor = torch.where(positives, log_prob, torch.zeros_like(log_prob)).sum(dim=1)
    keep = counts > 0
    return -(per_anchor[keep] / counts[keep]).sum()


def robustness_loss(t: torch.Tensor, t_adv: torch.Tensor, y: torch.Tensor, params: LossParams):
    """Returns (L1, cosine term, contrastive term)."""
    cos = cosine_alignment_loss(t, t_adv)
    if params.contrastive_inputs == "concat":
        csl = multi_positive_contrastive_loss(torch.cat([t, t_adv]), torch.cat([y, y]), params.tau)
    else:
        csl = multi_positive_contrastive_loss(t, y, params.tau, skip_unpaired=True)
    return cos + params.alpha * csl, cos, csl


def kl_divergence(p_logits: torch.Tensor, q_logits: torch.Tensor) -> torch.Tensor:
    """Batch mean of KL(softmax(p) || softmax(q))."""
    return kl_per_sample(p_logits, q_logits).mean()


def kl_per_sample(p_logits, q_logits):
    log_p = F.log_softmax(p_logits, dim=1)
    return (log_p.exp() * (log_p - F.log_softmax(q_logits, dim=1))).sum(dim=1)


def trades_loss(logits_nat, logits_adv, y, inv_lambda=6.0, kl_direction="nat_adv"):
    if kl_direction == "nat_adv":
        kl = kl_divergence(logits_nat, logits_adv)
    else:
        kl = kl_divergence(logits_adv, logits_nat)
    return F.cross_entropy(logits_nat, y) + inv_lambda * kl


def boosted_cross_entropy(logits, y):
    """CE plus -log(1 - max_{k != y} p_k), batch mean."""
    onehot = F.one_hot(y, logits.shape[1]).bool()
    runner_up = logits.masked_fill(onehot, float("-inf")).argmax(dim=1)
    # log(1 - p_k) = logsumexp(logits without k) - logsumexp(all logits)
    without = logits.masked_fill(F.one_hot(runner_up, logits.shape[1]).bool(), float("-inf"))
    log_rest = torch.logsumexp(without, dim=1) - torch.logsumexp(logits, dim=1)
    return F.cross_entropy(logits, y) - log_rest.mean()


def mart_loss(logits_nat, logits_adv, y, inv_lambda=6.0, kl_direction="nat_adv"):
    if kl_direction == "nat_adv":
        kl = kl_per_sample(logits_nat, logits_adv)
    else:
        kl = kl_per_sample(logits_adv, logits_nat)
    p_true = F.softmax(logits_nat, dim=1).gather(1, y[:, None]).squeeze(1)
    return boosted_cross_entropy(logits_adv, y) + inv_lambda * (kl * (1 - p_true)).mean()


def accuracy_loss(logits_nat, logits_adv, y, params: LossParams):
    fn = trades_loss if params.l2_variant == "trades" else mart_loss
    return fn(logits_nat, logits_adv, y, params.inv_lambda, params.kl_direction)
