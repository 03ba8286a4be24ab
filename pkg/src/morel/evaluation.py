"""Clean / white-box / transfer (black-box) accuracy and robustness reports."""

import csv
import json
import time
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

import torch

from .attacks import AttackSpec, cw_spec, fgsm_spec, pgd_spec, run_attack

EPSILON = 8 / 255


def default_suite(epsilon=EPSILON) -> List[AttackSpec]:
    """FGSM, PGD-20, PGD-100 (step eps/10) and CW-inf, all non-targeted."""
    return [fgsm_spec(epsilon), pgd_spec(20, epsilon), pgd_spec(100, epsilon), cw_spec(epsilon)]


def _as_tensors(data):
    if isinstance(data, tuple):
        return data
    return data.tensors()


@torch.no_grad()
def _correct(model, x, y):
    return int((model(x).argmax(dim=1) == y).sum())


def _batches(data, batch_size, device=None):
    x, y = _as_tensors(data)
    for start in range(0, len(y), batch_size):
        yield x[start:start + batch_size].to(device), y[start:start + batch_size].to(device)


def model_device(model):
    return next(model.parameters()).device


def accuracy(model, data, batch_size=256) -> float:
    """Top-1 accuracy in percent, model in eval mode."""
    was_training = model.training
    model.eval()
    correct = total = 0
    try:
        for x, y in _batches(data, batch_size, model_device(model)):
            correct += _correct(model, x, y)
            total += len(y)
    finally:
        model.train(was_training)
    return 100.0 * correct / max(total, 1)


def _transfer_accuracy(target, source, data, spec, batch_size, seed):
    generator = torch.Generator().manual_seed(seed)
    was_training = target.training
    target.eval()
    correct = total = 0
    try:
        for x, y in _batches(data, batch_size, model_device(target)):
            x_adv = run_attack(source, x, y, spec, generator)
            correct += _correct(target, x_adv, y)
            total += len(y)
    finally:
        target.train(was_training)
    return 100.0 * correct / max(total, 1)


def robust_accuracy(model, data, spec: AttackSpec, batch_size=256, seed=0) -> float:
    """White-box: adversarial examples crafted against `model` itself."""
    return _transfer_accuracy(model, model, data, spec, batch_size, seed)


def _shares_parameters(a, b):
    if a is b:
        return True
    ptrs = {p.data_ptr() for p in a.parameters()}
    return any(p.data_ptr() in ptrs for p in b.parameters())


def black_box_eval(target, surrogate, data, specs, batch_size=256, seed=0) -> Dict[str, float]:
    """Transfer attack: craft on `surrogate`, score on `target`."""
    if _shares_parameters(target, surrogate):
        raise ValueError("surrogate shares parameters with the target; that is a white-box evaluation")
    return {name: _transfer_accuracy(target, surrogate, data, spec, batch_size, seed)
            for name, spec in _named(specs).items()}


def _named(specs) -> Dict[str, AttackSpec]:
    named = {}
    for spec in specs:
        name, i = spec.name, 2
        while name in named:
            name, i = f"{spec.name}#{i}", i + 1
        named[name] = spec
    return named


@dataclass
class RobustnessReport:
    model_id: str
    checkpoint_kind: str
    mode: str
    dataset: str
    clean_acc: float
    per_attack: Dict[str, float]
    avg_robust: float
    attack_specs: Dict[str, dict]
    timestamp: str = field(default_factory=lambda: time.strftime("%Y-%m-%dT%H:%M:%S"))
    surrogate_id: Optional[str] = None

    def __post_init__(self):
        values = [self.clean_acc, *self.per_attack.values()]
        if any(not 0.0 <= v <= 100.0 for v in values):
            raise ValueError("accuracies must lie in [0, 100]")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "RobustnessReport":
        return cls(**json.loads(text))

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> "RobustnessReport":
        with open(path) as fh:
            return cls.from_json(fh.read())


def average(values) -> float:
    values = list(values)
    return sum(values) / len(values)


def build_report(model, data, suite, mode="whitebox", surrogate=None, model_id="model",
                 checkpoint_kind="last", dataset="unknown", batch_size=256, seed=0,
                 surrogate_id=None) -> RobustnessReport:
    if not suite:
        raise ValueError("attack suite is empty")
    named = _named(suite)
    clean = accuracy(model, data, batch_size)
    if mode == "whitebox":
        per_attack = {name: robust_accuracy(model, data, spec, batch_size, seed) for name, spec in named.items()}
    elif mode == "blackbox":
        if surrogate is None:
            raise ValueError("black-box evaluation needs a surrogate model")
        per_attack = black_box_eval(model, surrogate, data, suite, batch_size, seed)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return RobustnessReport(model_id, checkpoint_kind, mode, dataset, clean, per_attack,
                            average(per_attack.values()), {k: s.to_dict() for k, s in named.items()},
                            surrogate_id=surrogate_id)


def write_table(reports: List[RobustnessReport], path):
    """One row per model, best/last column pair per metric (clean, attacks, Avg-Robust)."""
    rows: Dict[str, Dict[str, RobustnessReport]] = {}
    metrics: List[str] = ["Clean"]
    for r in reports:
        rows.setdefault(r.model_id, {})[r.checkpoint_kind] = r
        for name in r.per_attack:
            if name not in metrics:
                metrics.append(name)
    metrics.append("Avg-Robust")

    def value(report, metric):
        if report is None:
            return ""
        if metric == "Clean":
            return f"{report.clean_acc:.2f}"
        if metric == "Avg-Robust":
            return f"{report.avg_robust:.2f}"
        v = report.per_attack.get(metric)
        return "" if v is None else f"{v:.2f}"

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method"] + [f"{m} ({kind})" for m in metrics for kind in ("best", "last")])
        for model_id, kinds in rows.items():
            writer.writerow([model_id] + [value(kinds.get(kind), m) for m in metrics for kind in ("best", "last")])


def plot_report(report: RobustnessReport, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    names = ["Clean", *report.per_attack, "Avg-Robust"]
    values = [report.clean_acc, *report.per_attack.values(), report.avg_robust]
    fig, ax = plt.subplots(figsize=(1.2 * len(names) + 2, 3.5))
    ax.bar(names, values, color=["tab:gray"] + ["tab:blue"] * len(report.per_attack) + ["tab:orange"])
    ax.set_ylabel("accuracy (%)")
    ax.set_ylim(0, 100)
    ax.set_title(f"{report.model_id} ({report.checkpoint_kind}, {report.mode})")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
