import os
import sys

import pytest
import torch
import torch.nn as nn

os.environ["MOREL_CHECK_ATTACKS"] = "1"
sys.path.insert(0, os.path.dirname(__file__))
torch.set_num_threads(1)


class LinearNet(nn.Sequential):
    """Flatten -> affine: the simplest differentiable classifier."""

    def __init__(self, in_features, classes, dtype=torch.float64):
        super().__init__(nn.Flatten(), nn.Linear(in_features, classes, dtype=dtype))


@pytest.fixture
def linear_pair():
    # two classes, two pixels; w = (1, -1) on class 0, zero on class 1
    net = LinearNet(2, 2)
    with torch.no_grad():
        net[1].weight.copy_(torch.tensor([[1.0, -1.0], [0.0, 0.0]], dtype=torch.float64))
        net[1].bias.zero_()
    return net


@pytest.fixture
def toy_cnn():
    from morel.models import SmallCNN

    torch.manual_seed(0)
    return SmallCNN(num_classes=4, width=4, feature_dim=8).eval()


@pytest.fixture
def toy_batch():
    g = torch.Generator().manual_seed(1)
    return torch.rand(6, 3, 8, 8, generator=g), torch.tensor([0, 1, 2, 3, 0, 1])


_CRITERIA = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        name = report.nodeid.split("::")[-1][len("test_criterion_"):]
        _CRITERIA[name] = report.outcome.upper()


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_CRITERIA, key=lambda n: int(n.split("_")[0])):
        number, _, label = name.partition("_")
        terminalreporter.write_line(f"criterion {number:>2} {label.replace('_', ' '):<32} {_CRITERIA[name]}")
