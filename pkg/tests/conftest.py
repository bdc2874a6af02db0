import numpy as np
import pytest

from fastattrib.diffusion import DenoiserArch, init_denoiser, make_dataset, make_schedule


TINY_ARCH = DenoiserArch(dim=16, n_classes=3, cond_dim=3, time_dim=4, hidden=(8,))


@pytest.fixture
def tiny_dataset():
    return make_dataset(n_classes=3, per_class=10, dim=16, seed=3)


@pytest.fixture
def tiny_theta():
    theta = init_denoiser(TINY_ARCH, make_schedule(20), seed=4)
    # non-zero biases so every code path carries signal
    return theta.with_flat(theta.flat + 0.05 * np.random.default_rng(0).standard_normal(theta.n_params))


CRITERIA = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[CRITERIA] = []


@pytest.fixture
def criterion(request):
    """``record(tag, ok, detail)`` prints and collects one pass/fail line."""
    lines = request.config.stash[CRITERIA]

    def record(tag, ok, detail=""):
        line = f"{tag}: {'PASS' if ok else 'FAIL'}  {detail}".rstrip()
        lines.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(CRITERIA, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
