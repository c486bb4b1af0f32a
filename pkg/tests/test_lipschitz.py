import numpy as np
import pytest

from conftest import small_energy
from epnp.energy import EnergyModel, EnergyNetConfig, QuadraticEnergy
from epnp.lipschitz import estimate_L, local_spectral_radius, make_probes, pairwise_ascent, step_size
from epnp.numerics import make_rng


def diag123():
    return QuadraticEnergy((1, 1, 3), S=np.array([[[1.0, 2.0, 3.0]]]))


class TestLocalSpectralRadius:
    def test_known_spectrum(self, rng):
        assert local_spectral_radius(diag123(), rng.standard_normal((1, 1, 3)), iters=200) == pytest.approx(3.0, abs=1e-6)

    def test_zero_network(self, rng):
        m = EnergyModel.zeros(EnergyNetConfig(height=8, width=8, num_conv_layers=2, channels=3), 0.1)
        assert local_spectral_radius(m, rng.uniform(0, 1, (1, 8, 8))) == 0.0

    def test_eps_guard(self):
        with pytest.raises(ValueError):
            local_spectral_radius(diag123(), np.ones((1, 1, 3)), eps=1e-17)

    def test_repeatable_across_seeds(self):
        m = small_energy(channels=6, layers=3)
        probes = [make_rng(i).uniform(0, 1, (1, 8, 8)) for i in range(20)]
        a = estimate_L(m, probes, iters=60, seed=0).raw_max
        b = estimate_L(m, probes, iters=60, seed=100).raw_max
        assert abs(a - b) <= 0.05 * max(a, b)


class TestPairwiseAscent:
    def test_linear_map(self, rng):
        q = QuadraticEnergy((1, 2, 2), S=2.0)
        assert pairwise_ascent(q, rng.standard_normal((1, 2, 2)), rng.standard_normal((1, 2, 2)), steps=20) == pytest.approx(2.0)

    def test_coincident_points(self):
        q = QuadraticEnergy((1, 2, 2), S=2.0)
        x = np.ones((1, 2, 2))
        assert pairwise_ascent(q, x, x, steps=5) == pytest.approx(2.0)

    def test_bounded_by_spectral_radius(self):
        m = small_energy(channels=6, layers=3)
        pts = [make_rng(i).uniform(0, 1, (1, 8, 8)) for i in range(6)]
        L = estimate_L(m, pts, iters=60, safety_factor=1.0).L
        for i in range(0, 6, 2):
            assert pairwise_ascent(m, pts[i], pts[i + 1], steps=100, seed=i) <= 1.05 * L


class TestEstimateL:
    def test_identity_stub(self, rng):
        est = estimate_L(QuadraticEnergy((1, 3, 3)), [rng.standard_normal((1, 3, 3)) for _ in range(10)])
        assert est.L == pytest.approx(1.1, rel=1e-4)
        assert est.num_probes == 10 and est.method == "jacobian-power"

    def test_linear_stub_exact(self, rng):
        est = estimate_L(diag123(), [rng.standard_normal((1, 1, 3)) for _ in range(10)], iters=300)
        assert est.L == pytest.approx(3.3, rel=1e-4)

    def test_zero_network_falls_back(self, rng):
        m = EnergyModel.zeros(EnergyNetConfig(height=8, width=8, num_conv_layers=1, channels=2), 0.1)
        L = estimate_L(m, [rng.uniform(0, 1, (1, 8, 8)) for _ in range(10)]).L
        assert L == 0
        assert step_size(L, 0.05, 0.1) == pytest.approx(0.05**2)

    def test_no_clamping(self, rng):
        est = estimate_L(QuadraticEnergy((1, 2, 2), S=7.0), [rng.standard_normal((1, 2, 2)) for _ in range(10)])
        assert est.L == pytest.approx(7.7, rel=1e-6)

    def test_empty(self):
        with pytest.raises(ValueError):
            estimate_L(diag123(), [])

    def test_probe_mix(self):
        imgs = [np.zeros((1, 4, 4)) + 0.5]
        probes = make_probes(imgs, n=6, sigma=0.01, seed=0)
        assert len(probes) == 6
        for p in probes[0::2]:
            assert np.abs(p - 0.5).max() < 0.1
        for p in probes[1::2]:
            assert p.min() >= 0 and p.max() <= 1 and p.std() > 0.1


class TestStepSize:
    def test_exact(self):
        assert step_size(1.0, 0.01, 0.01) == 5e-5

    def test_no_prior(self):
        assert step_size(0.0, 0.03, 0.1) == pytest.approx(0.03**2)

    def test_arithmetic(self):
        assert step_size(2.0, 0.1, 0.05) == pytest.approx(1 / 900)

    def test_monotone(self):
        Ls = np.linspace(0, 5, 11)
        g = [step_size(L, 0.02, 0.05) for L in Ls]
        assert all(a > b for a, b in zip(g, g[1:]))
        for e in (0.01, 0.1):
            assert step_size(1, 2 * e, 0.05) > step_size(1, e, 0.05)
            assert step_size(1, 0.05, 2 * e) > step_size(1, 0.05, e)

    @pytest.mark.parametrize("args", [(-1, 0.1, 0.1), (1, 0, 0.1), (1, 0.1, -0.1)])
    def test_invalid(self, args):
        with pytest.raises(ValueError):
            step_size(*args)
