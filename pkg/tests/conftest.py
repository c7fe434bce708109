import numpy as np
import pytest

from bdpm.dataset import SyntheticSpec, generate_synthetic
from bdpm.experiments import CvSettings, PipelineConfig
from bdpm.forest import ForestParams
from bdpm.neural import NetworkConfig
from bdpm.rfre import RfreConfig

ACCEPTANCE_LINES = []


def record_acceptance(number: int, ok: bool, detail: str) -> None:
    line = f"ACCEPTANCE {number:2d} {'PASS' if ok else 'FAIL'}: {detail}"
    ACCEPTANCE_LINES.append((number, line))
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def planted():
    return generate_synthetic(SyntheticSpec(effect_size=2.5), 7)


@pytest.fixture(scope="session")
def small_planted():
    return generate_synthetic(SyntheticSpec(n_per_class=20, n_taxa=60, n_informative=8, effect_size=3.0), 3)


def fast_pipeline(k=5, target=20) -> PipelineConfig:
    """A scaled-down pipeline that keeps every stage but runs in seconds."""
    return PipelineConfig(
        rfre=RfreConfig(target_features=target, rfe_step=10, forest=ForestParams(n_trees=50)),
        network=NetworkConfig(hidden_dim=16, attn_dim=8, embed_dim=4, epochs=40),
        cv=CvSettings(k=k),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def kkt_report(model, X, y, tol=None):
    """Largest KKT breach and Σαy over the training rows of a fitted SVM."""
    from bdpm.svm import decision_values
    tol = 1e-3 if tol is None else tol
    alpha = np.zeros(len(y))
    alpha[model.support_index] = model.alphas
    m = np.asarray(y) * decision_values(model, X)
    lower = alpha <= 0
    upper = alpha >= model.C
    free = ~lower & ~upper
    breach = np.concatenate([
        (1 - tol) - m[lower],
        m[upper] - (1 + tol),
        np.abs(m[free] - 1) - tol,
        [-np.inf],
    ])
    return float(breach.max()), float(abs(alpha @ np.asarray(y, dtype=float)))
