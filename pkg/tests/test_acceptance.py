"""One test per acceptance criterion, each at its stated tolerance and time budget.

The end-to-end criterion needs CIFAR-10 (python or binary layout) under
$MOREL_CIFAR10_ROOT or <repo>/data. The best/last and determinism criteria
reuse that run when the data is present and otherwise use a small synthetic
training run.
"""

import csv
import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch
from torch.func import functional_call

import oracles
from morel.attacks import AttackSpec, cw_spec, fgsm, fgsm_spec, pgd, pgd_spec, run_attack
from morel.data import DatasetError, load_dataset
from morel.embedding import ClassAttention, EmbeddingConfig, EmbeddingSpace
from morel.evaluation import robust_accuracy
from morel.experiments import ToyProtocol, run
from morel.losses import LossParams, cosine_alignment_loss, mart_loss, multi_positive_contrastive_loss, \
    robustness_loss, trades_loss
from morel.models import SmallCNN
from morel.scalarization import ScalarizationParams, conic_scalarize
from morel.training import export_model, fit, load_model, save_checkpoint
from toy import toy_config, toy_data

D = torch.float64
REPO = Path(__file__).resolve().parents[1]


def _cifar_root():
    candidates = [os.environ.get("MOREL_CIFAR10_ROOT"), str(REPO / "data")]
    for root in filter(None, candidates):
        try:
            load_dataset("cifar10", "test", root)
            return root
        except (DatasetError, OSError):
            continue
    return None


@pytest.fixture(scope="session")
def cifar_toy(tmp_path_factory):
    root = _cifar_root()
    if root is None:
        return None
    out = tmp_path_factory.mktemp("cifar_toy")
    protocol = ToyProtocol()
    result = run(load_dataset("cifar10", "train", root), load_dataset("cifar10", "test", root), str(out), protocol)
    return {"root": root, "out": out, "protocol": protocol, "result": result}


@pytest.fixture(scope="session")
def synthetic_toy(tmp_path_factory):
    # strong class signal so robust accuracy actually moves between epochs
    train, val = toy_data(per_class=32, classes=4, signal=0.3, noise=0.05)
    config = toy_config(epochs=6, eval_attack=pgd_spec(20, 8 / 255), model_kwargs={"width": 8, "feature_dim": 16})
    out = tmp_path_factory.mktemp("synthetic_toy")
    state = fit(config, train, val, out_dir=str(out))
    return {"out": out, "config": config, "train": train, "val": val, "state": state}


def _paired_labels(rng, n):
    y = np.repeat(rng.integers(0, 3, (n + 1) // 2), 2)[:n]
    if n % 2:
        y[-1] = y[0]
    return rng.permutation(y)


def test_criterion_1_loss_oracle_equivalence():
    start = time.perf_counter()
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        n, b = int(rng.integers(2, 9)), int(rng.integers(1, 17))
        t, t_adv = rng.normal(size=(n, b)), rng.normal(size=(n, b))
        y = _paired_labels(rng, n)
        tau = float(rng.uniform(0.2, 2.0))
        got_cos = cosine_alignment_loss(torch.from_numpy(t), torch.from_numpy(t_adv)).item()
        got_csl = multi_positive_contrastive_loss(torch.from_numpy(t), torch.from_numpy(y), tau).item()
        worst = max(worst, abs(got_cos - oracles.cosine_loss(t.tolist(), t_adv.tolist())),
                    abs(got_csl - oracles.contrastive_loss(t.tolist(), y.tolist(), tau)))
    elapsed = time.perf_counter() - start
    print(f"max abs error {worst:.3e} in {elapsed:.2f}s")
    assert worst <= 1e-9
    assert elapsed < 10


def _fd_relative_error(loss_fn, tensors, h=1e-6):
    """Autograd vs central differences over every entry of every tensor (edited in place)."""
    tensors = [t.detach().requires_grad_(True) for t in tensors]
    analytic = torch.autograd.grad(loss_fn(*tensors), tensors)
    worst = 0.0
    for t, g in zip(tensors, analytic):
        numeric = torch.zeros_like(t)
        with torch.no_grad():
            flat, nflat = t.view(-1), numeric.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                fp = loss_fn(*tensors).item()
                flat[i] = orig - h
                fm = loss_fn(*tensors).item()
                flat[i] = orig
                nflat[i] = (fp - fm) / (2 * h)
        worst = max(worst, oracles.relative_error(g.numpy(), numeric.numpy()))
    return worst


def test_criterion_2_gradient_fidelity():
    start = time.perf_counter()
    g = torch.Generator().manual_seed(0)
    y = torch.tensor([0, 1, 0, 2, 2, 1])
    params = LossParams(alpha=0.5, tau=0.5)
    errors = {
        "L1": _fd_relative_error(lambda a, b: robustness_loss(a, b, y, params)[0],
                                 [torch.randn(6, 5, generator=g, dtype=D), torch.randn(6, 5, generator=g, dtype=D)]),
        "TRADES": _fd_relative_error(lambda a, b: trades_loss(a, b, y),
                                     [torch.randn(6, 3, generator=g, dtype=D), torch.randn(6, 3, generator=g, dtype=D)]),
        "MART": _fd_relative_error(lambda a, b: mart_loss(a, b, y),
                                   [torch.randn(6, 3, generator=g, dtype=D), torch.randn(6, 3, generator=g, dtype=D)]),
    }
    torch.manual_seed(1)
    space = EmbeddingSpace(EmbeddingConfig(5, 4, 2)).double()
    with torch.no_grad():
        space.attention.norm.weight.uniform_(0.5, 1.5)
        space.attention.norm.bias.uniform_(-0.5, 0.5)
    names = [n for n, _ in space.named_parameters()]

    def embedded_l1(a, b, *weights):
        t, t_adv = functional_call(space, dict(zip(names, weights)), (a, b, y))
        return robustness_loss(t, t_adv, y, params)[0]

    inputs = [torch.randn(6, 5, generator=g, dtype=D), torch.randn(6, 5, generator=g, dtype=D)]
    weights = [p.detach().clone() for p in space.parameters()]
    errors["embedding path"] = _fd_relative_error(embedded_l1, inputs + weights)
    elapsed = time.perf_counter() - start
    print({k: f"{v:.2e}" for k, v in errors.items()}, f"{elapsed:.1f}s")
    assert max(errors.values()) < 1e-3
    assert elapsed < 60


def test_criterion_3_class_attention_oracle():
    start = time.perf_counter()
    worst = equivariance = row_sum = 0.0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        b, m, n = int(rng.choice([4, 8])), int(rng.choice([1, 2])), int(rng.integers(1, 7))
        torch.manual_seed(seed)
        module = ClassAttention(b, m).double()
        with torch.no_grad():
            module.norm.weight.uniform_(0.5, 1.5)
            module.norm.bias.uniform_(-0.5, 0.5)
        rows = torch.from_numpy(rng.normal(size=(n, b)))
        with torch.no_grad():
            out = module(rows)
            expected = oracles.class_attention(
                rows.numpy(), module.w_q.numpy(), module.w_k.numpy(), module.w_v.numpy(), module.w_o.numpy(),
                module.norm.weight.tolist(), module.norm.bias.tolist())
            perm = torch.from_numpy(rng.permutation(n))
            worst = max(worst, float(np.abs(out.numpy() - expected).max()))
            equivariance = max(equivariance, float((out[perm] - module(rows[perm])).abs().max()))
            row_sum = max(row_sum, float((module.scores(rows).sum(-1) - 1).abs().max()))
    elapsed = time.perf_counter() - start
    print(f"oracle {worst:.2e} equivariance {equivariance:.2e} row sums {row_sum:.2e} in {elapsed:.2f}s")
    assert worst <= 1e-6 and equivariance <= 1e-5 and row_sum <= 1e-6
    assert elapsed < 10


def test_criterion_4_attack_invariants():
    start = time.perf_counter()
    torch.manual_seed(0)
    model = SmallCNN(num_classes=4, width=4, feature_dim=8).eval()
    before = [p.detach().clone() for p in model.parameters()]
    g = torch.Generator().manual_seed(0)
    rng = np.random.default_rng(0)
    worst_gap = 0.0
    for call in range(1000):
        eps = 0.0 if call % 10 == 0 else float(rng.uniform(0, 0.1))
        x = torch.rand(4, 3, 8, 8, generator=g)
        x[0, 0, :2] = 0.0  # pixels on the domain boundary
        x[1, 1, :2] = 1.0
        y = torch.randint(0, 4, (4,), generator=g)
        family = ("fgsm", "pgd", "cw_linf")[call % 3]
        if family == "fgsm":
            spec = fgsm_spec(eps)
        elif family == "pgd":
            spec = AttackSpec("pgd", eps, float(rng.uniform(0.1, 1.0)) * eps, int(rng.integers(1, 11)),
                              bool(rng.integers(2)), str(rng.choice(["ce", "kl"])))
        else:
            spec = cw_spec(eps, iterations=int(rng.integers(1, 11)), lr=float(rng.uniform(1e-3, 0.1)))
        out = run_attack(model, x, y, spec, g)
        gap = float((out - x).abs().max())
        worst_gap = max(worst_gap, gap - eps)
        assert gap <= eps + 1e-6, (call, spec)
        assert out.min() >= 0 and out.max() <= 1, (call, spec)
        if eps == 0:
            assert torch.equal(out, x), (call, spec)
        if family == "pgd" and call % 9 == 1:
            one_step = pgd(model, x, y, AttackSpec("pgd", eps, eps, 1, False, "ce"))
            assert torch.equal(one_step, fgsm(model, x, y, eps)), call
    assert all(torch.equal(a, b) for a, b in zip(before, model.parameters()))
    elapsed = time.perf_counter() - start
    print(f"1000 calls, max (gap - eps) {worst_gap:.2e}, {elapsed:.1f}s")
    assert elapsed < 60


def test_criterion_5_scalarization():
    weighted = ScalarizationParams((0.1, 0.9), 0.0, (0.0, 0.0))
    rng = np.random.default_rng(0)
    for _ in range(100):
        l1, l2 = rng.uniform(0, 10, 2)
        assert conic_scalarize([l1, l2], weighted) == 0.1 * l1 + 0.9 * l2
    value = conic_scalarize([1.0, 2.0], ScalarizationParams())
    print(f"CS defaults on (1, 2) = {value!r}")
    assert round(value, 5) == 1.90006
    params = ScalarizationParams()
    losses = torch.tensor([1.0, 2.0], dtype=D, requires_grad=True)
    conic_scalarize([losses[0], losses[1]], params).backward()
    assert losses.grad.tolist() == [params.k[0] + params.gamma, params.k[1] + params.gamma]


def test_criterion_6_toy_end_to_end(cifar_toy):
    if cifar_toy is None:
        pytest.fail("CIFAR-10 not found: set MOREL_CIFAR10_ROOT or place cifar-10-batches-py/ under "
                    f"{REPO / 'data'}; the end-to-end criterion cannot run without it")
    result = cifar_toy["result"]
    for report in (result.natural, result.morel, result.transfer):
        print(report.model_id, report.mode, f"clean {report.clean_acc:.2f}", report.per_attack)
    print(f"{result.parameters} parameters, {result.seconds / 60:.1f} min")
    checks = result.checks()
    print(checks)
    assert result.parameters <= 200_000
    assert result.seconds <= 4 * 3600
    assert all(checks.values()), checks


def _toy_run(cifar_toy, synthetic_toy):
    """(run dir, eval attack, validation data, best_metric, eval history, seed, label)"""
    if cifar_toy is not None:
        from morel.experiments import subsample

        protocol = cifar_toy["protocol"]
        root = cifar_toy["root"]
        _, test = subsample(load_dataset("cifar10", "train", root), load_dataset("cifar10", "test", root), protocol)
        result = cifar_toy["result"]
        return (cifar_toy["out"] / "morel-t", protocol.config("morel-t").eval_attack, test,
                result.morel_best_metric, result.morel_eval_history, protocol.seed, "cifar10")
    state = synthetic_toy["state"]
    return (synthetic_toy["out"], state.config.eval_attack, synthetic_toy["val"], state.best_metric,
            state.eval_history, state.config.seed, "synthetic")


def test_criterion_7_best_last_protocol(cifar_toy, synthetic_toy):
    out, attack, val, best_metric, history, seed, label = _toy_run(cifar_toy, synthetic_toy)
    assert attack.name == "PGD-20"
    per_epoch = [r["robust_acc"] for r in history]
    model, payload = load_model(str(out / "best.pt"))
    again = robust_accuracy(model, val, attack, 256, seed=seed)
    print(f"[{label}] per-epoch PGD-20 {per_epoch}; best {best_metric} at epoch {payload['best_epoch']}; "
          f"re-evaluated {again}")
    assert best_metric == max(per_epoch)
    assert payload["best_metric"] == best_metric
    assert abs(again - best_metric) <= 0.2


def test_criterion_8_export_fidelity(synthetic_toy, tmp_path):
    state = synthetic_toy["state"]
    ckpt, exported = tmp_path / "train.pt", tmp_path / "export.pt"
    save_checkpoint(state, str(ckpt))
    export_model(str(ckpt), str(exported))
    trained, _ = load_model(str(ckpt))
    stripped, _ = load_model(str(exported))
    x, _ = synthetic_toy["val"].tensors()
    with torch.no_grad():
        assert torch.equal(stripped(x), trained(x))
    payload = torch.load(exported, weights_only=True)
    keys = set(payload) | set(payload["model"])
    print(f"export keys {sorted(payload)}; {os.path.getsize(exported)} vs {os.path.getsize(ckpt)} bytes")
    assert "embedding" not in payload
    assert not any("embedding" in k or "attention" in k for k in keys)
    reference = torch.load(ckpt, weights_only=True)
    assert reference["embedding"] is not None


def _read_rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def _compare_histories(a_dir, b_dir):
    worst, exact = 0.0, True
    for name in ("history.csv", "epochs.csv"):
        a, b = (a_dir / name).read_text(), (b_dir / name).read_text()
        exact &= a == b
        rows_a, rows_b = _read_rows(a_dir / name), _read_rows(b_dir / name)
        assert len(rows_a) == len(rows_b) and rows_a and rows_a[0].keys() == rows_b[0].keys()
        for ra, rb in zip(rows_a, rows_b):
            for key in ra:
                try:
                    worst = max(worst, abs(float(ra[key]) - float(rb[key])))
                except ValueError:
                    assert ra[key] == rb[key]
    return worst, exact


def test_criterion_9_determinism(cifar_toy, synthetic_toy, tmp_path):
    if cifar_toy is not None:
        from morel.experiments import subsample

        protocol, root = cifar_toy["protocol"], cifar_toy["root"]
        train, test = subsample(load_dataset("cifar10", "train", root), load_dataset("cifar10", "test", root),
                                protocol)
        fit(protocol.config("morel-t"), train, test, out_dir=str(tmp_path))
        first, label = cifar_toy["out"] / "morel-t", "cifar10"
    else:
        fit(synthetic_toy["config"], synthetic_toy["train"], synthetic_toy["val"], out_dir=str(tmp_path))
        first, label = synthetic_toy["out"], "synthetic"
    worst, exact = _compare_histories(first, tmp_path)
    print(f"[{label}] max metric difference {worst:.3e}; byte-identical: {exact}")
    assert worst <= 1e-6
