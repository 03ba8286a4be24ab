"""Conic scalarization of the two training objectives."""

from dataclasses import dataclass
from typing import Sequence, Tuple


@dataclass
class ScalarizationParams:
    """Preference vector k, augmentation coefficient gamma, reference point a.

    abs_mode uses |L_i - a_i| in the augmentation sum instead of the signed
    difference; the two agree whenever every L_i >= a_i.
    """

    k: Tuple[float, float] = (0.1, 0.9)
    gamma: float = 2e-5
    a: Tuple[float, float] = (0.0, 0.0)
    abs_mode: bool = False

    def __post_init__(self):
        self.k = tuple(float(v) for v in self.k)
        self.a = tuple(float(v) for v in self.a)
        if len(self.k) != 2 or len(self.a) != 2:
            raise ValueError("k and a must each hold two values")
        if not 0 <= self.gamma < min(self.k):
            raise ValueError(f"need 0 <= gamma < min(k); got gamma={self.gamma}, k={self.k}")
        if min(self.a) < 0:
            raise ValueError("reference point a must be non-negative")

    def to_dict(self):
        return {"k1": self.k[0], "k2": self.k[1], "gamma": self.gamma,
                "a1": self.a[0], "a2": self.a[1], "abs_mode": self.abs_mode}

    @classmethod
    def from_dict(cls, d):
        return cls((d["k1"], d["k2"]), d["gamma"], (d["a1"], d["a2"]), d.get("abs_mode", False))


def conic_scalarize(losses: Sequence, params: ScalarizationParams):
    """sum_i k_i (L_i - a_i) + gamma * sum_i (L_i - a_i).

    Works on floats or tensors; with tensors, d/dL_i = k_i + gamma when not in abs_mode.
    """
    if len(losses) != 2:
        raise ValueError("exactly two objectives are supported")
    shifted = [loss - a for loss, a in zip(losses, params.a)]
    weighted = params.k[0] * shifted[0] + params.k[1] * shifted[1]
    if params.abs_mode:
        shifted = [abs(s) for s in shifted]
    return weighted + params.gamma * (shifted[0] + shifted[1])


def reference_violations(losses: Sequence, params: ScalarizationParams):
    """Indices i where a_i < L_i fails (checked and reported, never fatal)."""
    return [i for i, (loss, a) in enumerate(zip(losses, params.a)) if not float(a) < float(loss)]
