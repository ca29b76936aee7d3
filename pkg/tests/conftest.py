import numpy as np
import pytest

from oarl import data, envs


@pytest.fixture(scope="session")
def traffic_config():
    return envs.TrafficWorldConfig()


@pytest.fixture(scope="session")
def small_traffic_dataset(traffic_config):
    return data.collect_dataset(traffic_config, n_episodes=300, seed=11)


@pytest.fixture(scope="session")
def full_traffic_dataset(traffic_config):
    """The 7000-episode demonstration set used by the long-run checks."""
    return data.collect_dataset(traffic_config, n_episodes=7000, seed=0)


def random_batch(rng, n, obs_dim, n_actions):
    return data.Batch(
        rng.integers(0, 2, size=(n, obs_dim)).astype(np.float32),
        rng.integers(0, n_actions, size=n),
        rng.normal(size=n).astype(np.float32),
        rng.integers(0, 2, size=(n, obs_dim)).astype(np.float32),
        rng.random(n) < 0.2,
    )


def pytest_configure(config):
    config.acceptance_lines = []


@pytest.fixture
def record_criterion(request):
    """Log one PASS/FAIL line for an acceptance criterion, shown in the terminal summary."""

    def record(number, passed, detail):
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        request.config.acceptance_lines.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
