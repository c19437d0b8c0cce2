"""The oracles reproduce the frozen reference values they produced."""

import numpy as np
import pytest

import frozen
import oracles


class TestFrozenValues:
    def test_tabular_values(self, tabular):
        spec, pol = tabular
        theta = np.array(frozen.TABULAR_THETA)
        for j in (0, 1):
            assert oracles.dp_value(spec, pol, theta, j) == pytest.approx(frozen.TABULAR_V[j], abs=1e-14)

    def test_tabular_gradients(self, tabular):
        spec, pol = tabular
        theta = np.array(frozen.TABULAR_THETA)
        for j in (0, 1):
            np.testing.assert_allclose(oracles.fd_gradient(spec, pol, theta, j), frozen.TABULAR_GRAD[j], atol=1e-9)

    def test_constants(self):
        assert oracles.phi_loop(1, 0.5, 2) == frozen.PHI
        assert oracles.phi_bar_loop(1, 0.5, 2, 0.5) == frozen.PHI_BAR
        assert oracles.psi_loop(1, 0, 0.5, 2, 1) == frozen.PSI
        assert oracles.lipschitz_loop(1, 1, 1, 0.5, 2) == frozen.L_J
        assert oracles.episodes_required_loop(0.85455, 0.1, 1.75) == frozen.EPISODES_REQUIRED
        assert oracles.horizon_confidence_loop(1, 10, 0.01) == pytest.approx(frozen.HORIZON_CONFIDENCE, abs=1e-12)
        assert oracles.margin_direct(-1, 1, 0.1, 1, 2, 1) == pytest.approx(frozen.MARGIN, abs=1e-15)

    def test_grid_oracle_on_disk(self):
        val, xi = oracles.grid_qcqp([1.0, 1.0], [-1.0], [[0.0, 0.0]], 2.0)
        assert val == pytest.approx(frozen.DISK_PROJECTION_VALUE, abs=1e-6)
        np.testing.assert_allclose(xi, [-(2**-0.5)] * 2, atol=1e-5)

    def test_disk_geometry(self):
        c, r2 = oracles.disks([0, 0], [1.0], [[0.0, 0.0]], 1.0)
        assert not oracles.disks_intersect(c, r2)
        c, r2 = oracles.disks([0, 0], [-0.5, -0.5], [[2.0, 0.0], [-2.0, 0.0]], 1.0)
        assert oracles.disks_intersect(c, r2)
