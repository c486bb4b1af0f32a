import numpy as np
import pytest

from epnp.energy import EnergyModel, EnergyNetConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def small_energy(activation="softplus", head="dense", channels=4, layers=2, size=8, in_channels=1, seed=0):
    cfg = EnergyNetConfig(in_channels=in_channels, height=size, width=size, num_conv_layers=layers,
                          channels=channels, activation=activation, head=head)
    return EnergyModel.init(cfg, sigma=0.1, seed=seed, dtype=np.float64)


@pytest.fixture
def smooth_model():
    return small_energy()


ACCEPTANCE = []


@pytest.fixture
def criterion():
    """Record one acceptance line, then assert it."""

    def record(number, title, ok, detail=""):
        ACCEPTANCE.append((number, title, bool(ok), detail))
        assert ok, f"criterion {number} ({title}) failed: {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, ok, detail in sorted(ACCEPTANCE, key=lambda r: r[0]):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} [{number}] {title}: {detail}")
