import numpy as np
import pytest

from wcasynth import tensor as tn
from wcasynth.tensor import Tensor


def grad_check(f, inputs, probes: int = 8, seed: int = 0, eps: float = 1e-3) -> float:
    """Worst relative error between backward() and central differences of sum(f(*inputs)).

    ``probes`` random entries of every input are compared.
    """
    rng = np.random.default_rng(seed)
    for x in inputs:
        x.requires_grad = True
        x.grad = None
    with tn.Tape() as tape:
        loss = tn.sum(f(*inputs))
    tn.backward(loss, tape)
    worst = 0.0
    for x in inputs:
        idx = rng.choice(x.size, size=min(probes, x.size), replace=False)
        numeric = tn.finite_diff_grad(lambda _: f(*inputs), x, eps=eps, indices=idx)
        analytic = np.zeros(x.size) if x.grad is None else x.grad.reshape(-1)[idx]
        worst = max(worst, tn.max_relative_error(analytic, numeric))
    return worst


@pytest.fixture
def gradcheck():
    return grad_check


@pytest.fixture
def rand():
    rng = np.random.default_rng(1234)

    def make(*shape, lo=-2.0, hi=2.0):
        return Tensor(rng.uniform(lo, hi, shape))
    return make


# -- acceptance summary ---------------------------------------------------------------

_criteria: dict[str, tuple[str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    name = item.name
    if not name.startswith("test_criterion_"):
        return
    key = name[len("test_criterion_"):len("test_criterion_") + 2]
    detail = "; ".join(getattr(item, "criterion_detail", []))
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        status = "PASS" if rep.passed else ("SKIP" if rep.skipped else "FAIL")
        _criteria[key] = (status, detail)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_criteria):
        status, detail = _criteria[key]
        terminalreporter.write_line(f"criterion {key}: {status}  {detail}".rstrip())
