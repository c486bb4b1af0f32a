import time

import numpy as np
import pytest

from epnp.baselines import ScoreNet, ScoreNetConfig
from epnp.energy import EnergyModel, EnergyNetConfig
from epnp.pipeline import PipelineConfig
from epnp.verify import run_verify, smooth_twin


def names(report, passed):
    return {c["name"] for c in report["checks"] if c["passed"] == passed and not c.get("informational")}


@pytest.fixture(scope="module")
def fresh():
    return EnergyModel.init(PipelineConfig().energy, 0.01, seed=4)


def test_fresh_model_passes_quickly(fresh):
    t0 = time.perf_counter()
    rep = run_verify(fresh, "quick")
    assert time.perf_counter() - t0 < 60
    assert rep["passed"], [c for c in rep["checks"] if not c["passed"]]
    assert {"adjoint_dot_tests", "step_size_rule", "score_is_energy_gradient", "jacobian_symmetry",
            "line_integral_path_independence", "parameter_gradients", "monotone_descent_smoke"} <= names(rep, True)


def test_decoupled_model_fails_symmetry(fresh):
    rep = run_verify(fresh.decoupled(seed=2), "quick")
    assert not rep["passed"]
    assert "jacobian_symmetry" in names(rep, False)


def test_relu_model_checked_through_smooth_twin():
    cfg = EnergyNetConfig(in_channels=1, height=16, width=16, num_conv_layers=3, channels=8)
    m = EnergyModel.init(cfg, 0.05, seed=0)
    twin = smooth_twin(m)
    assert twin.config.activation == "softplus" and m.config.activation == "relu"
    assert twin.params["conv0.weight"] is not m.params["conv0.weight"]
    rep = run_verify(m, "quick")
    assert rep["smooth_twin"] and rep["passed"]


def test_scorenet_report():
    net = ScoreNet.init(ScoreNetConfig(in_channels=2, height=16, width=16, num_layers=3, channels=4), 0.01)
    rep = run_verify(net, "quick")
    assert rep["passed"]
    info = [c for c in rep["checks"] if c.get("informational")]
    assert [c["name"] for c in info] == ["jacobian_symmetry"]


def test_unknown_level(fresh):
    with pytest.raises(ValueError):
        run_verify(fresh, "exhaustive")


def test_report_is_json_ready(fresh):
    import json

    json.dumps(run_verify(EnergyModel.zeros(EnergyNetConfig(height=8, width=8, num_conv_layers=1, channels=2),
                                            0.1), "quick"))
