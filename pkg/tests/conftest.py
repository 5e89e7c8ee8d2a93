import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from routed_steering import model as M

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def tiny_config():
    return M.ModelConfig(num_layers=3, model_dim=32, num_heads=4, max_context=48, intervention_layer=1)


@pytest.fixture(scope="session")
def tiny_model(tiny_config):
    return M.FrozenModel(tiny_config, M.init_weights(tiny_config, 0))


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.abs(a - b).max() / max(np.abs(a).max(), np.abs(b).max(), 1e-8))


# one (criterion, passed, detail) entry per acceptance criterion, printed after the run
ACCEPTANCE: list[tuple[str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in sorted(ACCEPTANCE, key=lambda t: int(t[0].split()[0])):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
