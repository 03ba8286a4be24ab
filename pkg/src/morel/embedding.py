"""Training-time embedding space: linear projection, per-class grouping,
class-adaptive multi-head attention and l2-normalized reassembly.

Nothing here is used at inference; checkpoints keep these weights under a
separate namespace so export can drop them.
"""

import math
from dataclasses import dataclass
from typing import List, Tuple

import torch
import torch.nn as nn


@dataclass
class EmbeddingConfig:
    encoder_dim: int
    embed_dim: int = 128
    heads: int = 2

    def __post_init__(self):
        if self.encoder_dim < 1 or self.embed_dim < 1 or self.heads < 1:
            raise ValueError("encoder_dim, embed_dim and heads must be positive")
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} is not divisible by heads {self.heads}")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads


@dataclass
class ClassGroup:
    class_id: int
    rows: torch.Tensor
    source_indices: torch.Tensor

    def __len__(self):
        return len(self.source_indices)


class EmbeddingError(RuntimeError):
    pass


def group_by_class(s: torch.Tensor, y: torch.Tensor) -> List[ClassGroup]:
    if len(s) != len(y):
        raise ValueError(f"{len(s)} rows but {len(y)} labels")
    groups = []
    for c in torch.unique(y, sorted=True).tolist():
        idx = (y == c).nonzero().squeeze(1)
        groups.append(ClassGroup(c, s[idx], idx))
    return groups


def ungroup(groups: List[ClassGroup]) -> torch.Tensor:
    """Inverse of group_by_class: rows back in original batch order."""
    order = torch.cat([g.source_indices for g in groups])
    rows = torch.cat([g.rows for g in groups])
    inverse = torch.empty_like(order)
    inverse[order] = torch.arange(len(order), device=order.device)
    return rows[inverse]


class ClassAttention(nn.Module):
    """Multi-head self-attention over the rows of one class group.

    Pre-norm, no positional encoding, residual on the un-normalized input.
    Layer norm does not depend on the head, so it is computed once.
    """

    def __init__(self, embed_dim: int, heads: int):
        super().__init__()
        if embed_dim % heads:
            raise ValueError(f"embed_dim {embed_dim} is not divisible by heads {heads}")
        self.embed_dim, self.heads = embed_dim, heads
        self.head_dim = embed_dim // heads
        self.norm = nn.LayerNorm(embed_dim)
        self.w_q = nn.Parameter(torch.empty(heads, embed_dim, self.head_dim))
        self.w_k = nn.Parameter(torch.empty(heads, embed_dim, self.head_dim))
        self.w_v = nn.Parameter(torch.empty(heads, embed_dim, self.head_dim))
        self.w_o = nn.Parameter(torch.empty(heads * self.head_dim, embed_dim))
        self.reset_parameters()

    def reset_parameters(self):
        bound = 1 / math.sqrt(self.embed_dim)
        for w in (self.w_q, self.w_k, self.w_v):
            nn.init.uniform_(w, -bound, bound)
        out_bound = 1 / math.sqrt(self.heads * self.head_dim)
        nn.init.uniform_(self.w_o, -out_bound, out_bound)
        self.norm.reset_parameters()

    def _attend(self, rows):
        normed = self.norm(rows)
        q, k, v = (torch.einsum("nb,hbd->hnd", normed, w) for w in (self.w_q, self.w_k, self.w_v))
        attn = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(self.head_dim), dim=-1)
        return attn, v

    def scores(self, rows: torch.Tensor) -> torch.Tensor:
        """Attention matrices, shape (heads, n_y, n_y)."""
        return self._attend(rows)[0]

    def forward(self, rows: torch.Tensor) -> torch.Tensor:
        attn, v = self._attend(rows)
        heads_out = attn @ v
        finite = torch.isfinite(heads_out).flatten(1).all(dim=1)
        if not bool(finite.all()):
            bad = int((~finite).nonzero()[0])
            raise EmbeddingError(f"non-finite attention output in head {bad}")
        # (heads, n, d) -> (n, heads * d), head-major like concat(O_1, ..., O_m)
        concat = heads_out.transpose(0, 1).reshape(len(rows), -1)
        return rows + concat @ self.w_o


def class_attention(group: ClassGroup, module: ClassAttention) -> ClassGroup:
    if group.rows.ndim != 2 or group.rows.shape[1] != module.embed_dim:
        raise ValueError(f"group rows must be (n_y, {module.embed_dim}), got {tuple(group.rows.shape)}")
    return ClassGroup(group.class_id, module(group.rows), group.source_indices)


def l2_normalize(rows: torch.Tensor, min_norm: float = 1e-12) -> torch.Tensor:
    norms = rows.norm(dim=1, keepdim=True)
    if bool((norms < min_norm).any()):
        raise EmbeddingError("zero-norm embedded feature (degenerate embedding)")
    return rows / norms


def assemble_normalize(natural_groups: List[ClassGroup], adversarial_groups: List[ClassGroup]
                       ) -> Tuple[torch.Tensor, torch.Tensor]:
    for g, g_adv in zip(natural_groups, adversarial_groups):
        if g.class_id != g_adv.class_id or not torch.equal(g.source_indices, g_adv.source_indices):
            raise ValueError("natural and adversarial groupings disagree")
    if len(natural_groups) != len(adversarial_groups):
        raise ValueError("natural and adversarial groupings disagree")
    return l2_normalize(ungroup(natural_groups)), l2_normalize(ungroup(adversarial_groups))


class EmbeddingSpace(nn.Module):
    """Shared projection + class attention applied to natural and adversarial features."""

    def __init__(self, config: EmbeddingConfig):
        super().__init__()
        self.config = config
        self.linear = nn.Linear(config.encoder_dim, config.embed_dim)
        self.attention = ClassAttention(config.embed_dim, config.heads)

    def embed(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[-1] != self.config.encoder_dim:
            raise ValueError(f"expected features of dim {self.config.encoder_dim}, got {z.shape[-1]}")
        return self.linear(z)

    def forward(self, z, z_adv, y):
        groups = [class_attention(g, self.attention) for g in group_by_class(self.embed(z), y)]
        groups_adv = [class_attention(g, self.attention) for g in group_by_class(self.embed(z_adv), y)]
        return assemble_normalize(groups, groups_adv)
