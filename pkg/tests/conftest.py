import numpy as np
import pytest

from humanline_lab.policy import Policy, Vocabulary


def naive_log_softmax(row):
    """Two-pass reference softmax, written independently of the package."""
    row = [float(v) for v in row]
    m = max(row)
    total = sum(np.exp(v - m) for v in row)
    return [v - m - np.log(total) for v in row]


@pytest.fixture
def vocab4():
    return Vocabulary(4, 3)


@pytest.fixture
def tiny_policy(vocab4):
    rng = np.random.default_rng(7)
    p = Policy(vocab4, [(0,), (1,)], n=2, max_len=5)
    p.logits[:] = rng.standard_normal(p.logits.shape)
    return p


def perturbed(policy, scale, seed):
    q = policy.clone()
    q.logits += scale * np.random.default_rng(seed).standard_normal(q.logits.shape)
    return q


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
