import time
import warnings

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from headdet.smallnet import NetworkModel, NetworkSpec, init_model

settings.register_profile(
    "default", max_examples=50, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

ACCEPTANCE_LINES: list[str] = []
REFERENCE_SECONDS: dict[str, float] = {}


def random_model(rng: np.random.Generator, dims, scale: float = 1.0) -> NetworkModel:
    spec = NetworkSpec(tuple(dims))
    model = init_model(spec, int(rng.integers(2**31)))
    weights = [scale * w for w in model.weights]
    biases = [rng.normal(0.0, 0.1, size=b.shape) for b in model.biases]
    return NetworkModel(spec, weights, biases)


def dense_model(weights, biases=None) -> NetworkModel:
    weights = [np.asarray(w, dtype=np.float64) for w in weights]
    if biases is None:
        biases = [np.zeros(w.shape[0]) for w in weights]
    dims = (weights[0].shape[1],) + tuple(w.shape[0] for w in weights)
    return NetworkModel(NetworkSpec(dims), weights, [np.asarray(b, dtype=np.float64) for b in biases])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def reference_run(tmp_path_factory):
    """One pipeline run on the reference setup, shared by the slow tests."""
    from headdet.experiment import ExperimentConfig, run_experiment

    cfg = ExperimentConfig(out=str(tmp_path_factory.mktemp("reference")), seed=0)
    start = time.perf_counter()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        report = run_experiment(cfg)
    REFERENCE_SECONDS["run"] = time.perf_counter() - start
    return cfg, report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
