import numpy as np
import pytest

from conftest import small_energy
from epnp.baselines import ScoreNet, ScoreNetConfig
from epnp.checkpoint import CheckpointError, load_checkpoint, read_header, save_checkpoint, update_header


def test_energy_round_trip(tmp_path, rng):
    m = small_energy()
    m.lipschitz = {"L": 1.7, "method": "jacobian-power"}
    save_checkpoint(tmp_path / "m.ckpt", m)
    back = load_checkpoint(tmp_path / "m.ckpt")
    assert back.config == m.config and back.sigma == m.sigma and back.L == 1.7
    x = rng.uniform(0, 1, (1, 8, 8))
    assert back.energy(x) == m.energy(x)
    np.testing.assert_array_equal(back.score(x), m.score(x))


def test_decoupled_survives(tmp_path, rng):
    m = small_energy().decoupled(seed=3)
    save_checkpoint(tmp_path / "d.ckpt", m)
    assert read_header(tmp_path / "d.ckpt")["decoupled_decoder"]
    back = load_checkpoint(tmp_path / "d.ckpt")
    x = rng.uniform(0, 1, (1, 8, 8))
    np.testing.assert_array_equal(back.score(x), m.score(x))


def test_scorenet_round_trip(tmp_path):
    net = ScoreNet.init(ScoreNetConfig(height=8, width=8, num_layers=3, channels=4), 0.05, seed=2)
    save_checkpoint(tmp_path / "s.ckpt", net)
    back = load_checkpoint(tmp_path / "s.ckpt")
    assert back.kind == "scorenet" and back.sigma == 0.05
    for a, b in zip(net.blocks(), back.blocks()):
        np.testing.assert_array_equal(a.value, b.value)


def test_update_header(tmp_path):
    save_checkpoint(tmp_path / "m.ckpt", small_energy())
    update_header(tmp_path / "m.ckpt", lipschitz_L=2.5)
    assert load_checkpoint(tmp_path / "m.ckpt").L == 2.5


def test_missing(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "nope.ckpt")


def test_not_a_checkpoint(tmp_path):
    (tmp_path / "x.ckpt").write_bytes(b"garbage!" + bytes(16))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "x.ckpt")


def test_trailing_bytes(tmp_path):
    save_checkpoint(tmp_path / "m.ckpt", small_energy())
    with open(tmp_path / "m.ckpt", "ab") as fh:
        fh.write(b"\0")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "m.ckpt")
