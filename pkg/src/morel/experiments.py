"""Scaled-down end-to-end robustness experiment.

Trains a naturally trained control, a MOREL-T model and an independently
seeded natural surrogate on the same subsample, then scores white-box and
transfer robustness. Run as ``python3 -m morel.experiments --root DATA``.
"""

import argparse
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from typing import Dict, Optional

from .attacks import AttackSpec, pgd_spec
from .data import LabeledImages, load_dataset
from .evaluation import RobustnessReport, build_report, default_suite
from .losses import LossParams
from .models import count_parameters
from .training import TrainConfig, fit, load_model, rescale_milestones

logger = logging.getLogger(__name__)

EPSILON = 8 / 255
PARAM_BUDGET = 200_000


@dataclass
class ToyProtocol:
    train_size: int = 5000
    test_size: int = 1000
    epochs: int = 10
    train_iterations: int = 5
    seed: int = 0
    model_kwargs: dict = field(default_factory=lambda: {"width": 32, "feature_dim": 128})
    embed_dim: int = 128
    eval_batch_size: int = 250

    def config(self, method: str, seed: Optional[int] = None) -> TrainConfig:
        adversarial = method != "natural"
        return TrainConfig(
            method=method, epochs=self.epochs, lr_milestones=scaled_milestones(self.epochs),
            train_attack=AttackSpec("pgd", EPSILON, EPSILON / 4, self.train_iterations, True,
                                    "kl" if adversarial else "ce"),
            eval_attack=pgd_spec(20, EPSILON), loss=LossParams(l2_variant="trades"),
            embed_dim=self.embed_dim, model_kwargs=dict(self.model_kwargs),
            seed=self.seed if seed is None else seed, augment=False,
            eval_batch_size=self.eval_batch_size)


def scaled_milestones(epochs: int):
    """The full-length schedule's decay points rescaled to `epochs` (10 -> (8, 9))."""
    full = TrainConfig()
    return rescale_milestones(full.lr_milestones, full.epochs, epochs)


@dataclass
class ToyResult:
    natural: RobustnessReport
    morel: RobustnessReport
    transfer: RobustnessReport
    morel_best_metric: float
    morel_eval_history: list
    parameters: int
    seconds: float

    def checks(self, slack: float = 1.0) -> Dict[str, bool]:
        """The four end-to-end requirements, keyed (a) to (d)."""
        nat, mor, bb = self.natural, self.morel, self.transfer
        ordered = all(_ordered(r, slack) for r in (nat, mor))
        transfer_ok = all(bb.per_attack[k] >= v - slack for k, v in mor.per_attack.items() if k in bb.per_attack)
        return {
            "a_robust_gain": mor.per_attack["PGD-20"] - nat.per_attack["PGD-20"] >= 15.0,
            "b_clean_gap": nat.clean_acc - mor.clean_acc <= 12.0,
            "c_attack_ordering": ordered,
            "d_transfer_ge_whitebox": transfer_ok,
        }

    def to_dict(self):
        d = asdict(self)
        d["checks"] = self.checks()
        return d


def _ordered(report: RobustnessReport, slack: float) -> bool:
    chain = [report.clean_acc] + [report.per_attack[k] for k in ("FGSM", "PGD-20", "PGD-100")]
    return all(a >= b - slack for a, b in zip(chain, chain[1:]))


def subsample(train: LabeledImages, test: LabeledImages, protocol: ToyProtocol):
    return train.subsample(protocol.train_size, protocol.seed), test.subsample(protocol.test_size, protocol.seed + 1)


def run(train: LabeledImages, test: LabeledImages, out_dir: str, protocol: ToyProtocol = ToyProtocol()) -> ToyResult:
    """Train the three models under out_dir and evaluate their last checkpoints on `test`."""
    start = time.time()
    train, test = subsample(train, test, protocol)
    suite = default_suite(EPSILON)
    runs = {"natural": ("natural", protocol.seed), "morel-t": ("morel-t", protocol.seed),
            "surrogate": ("natural", protocol.seed + 1)}
    states = {}
    for name, (method, seed) in runs.items():
        logger.info("training %s", name)
        states[name] = fit(protocol.config(method, seed), train, test, out_dir=os.path.join(out_dir, name))
    n_params = count_parameters(states["morel-t"].model)
    if n_params > PARAM_BUDGET:
        raise ValueError(f"toy model has {n_params} parameters, budget is {PARAM_BUDGET}")

    def last(name):
        model, _ = load_model(os.path.join(out_dir, name, "last.pt"))
        return model

    kw = dict(dataset=test.name, batch_size=protocol.eval_batch_size, seed=protocol.seed, checkpoint_kind="last")
    natural, morel, surrogate = last("natural"), last("morel-t"), last("surrogate")
    result = ToyResult(
        natural=build_report(natural, test, suite, model_id="natural", **kw),
        morel=build_report(morel, test, suite, model_id="morel-t", **kw),
        transfer=build_report(morel, test, suite, "blackbox", surrogate, model_id="morel-t",
                              surrogate_id="surrogate", **kw),
        morel_best_metric=states["morel-t"].best_metric,
        morel_eval_history=states["morel-t"].eval_history,
        parameters=n_params,
        seconds=time.time() - start,
    )
    with open(os.path.join(out_dir, "toy_result.json"), "w") as fh:
        json.dump(result.to_dict(), fh, indent=2)
    return result


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--root", required=True, help="directory holding the CIFAR-10 batches")
    parser.add_argument("--out", default="runs/toy")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--epochs", type=int, default=10)
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    protocol = ToyProtocol(seed=args.seed, epochs=args.epochs)
    result = run(load_dataset("cifar10", "train", args.root), load_dataset("cifar10", "test", args.root),
                 args.out, protocol)
    print(json.dumps(result.to_dict()["checks"], indent=2))
    return 0 if all(result.checks().values()) else 1


if __name__ == "__main__":
    raise SystemExit(main())
