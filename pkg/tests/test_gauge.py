import json
import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ctmgrad.ctm import Environment, converge_ctm
from ctmgrad.errors import GaugeFixingError, SchemeInapplicableError
from ctmgrad.gauge import (apply_gauge, fix_environment, fix_gauge_cascade, fix_gauge_phases,
                           fix_gauge_robust, fix_gauge_transfer, gauge_nullspace,
                           multiplet_blocks, verify)
from ctmgrad.models import AnsatzSpec, build_ansatz

from gauge_cases import (blocks_of, corner_with_multiplets, degenerate_case, hermitian_edge,
                         phases_case, planted, symmetric_case)


def check(g, T_hat, T, C, tol=1e-9):
    res, unit, comm = verify(T_hat, T, C, g.sigma)
    assert res <= tol and unit <= 1e-10 and comm <= 1e-10
    assert res == g.residual


def test_multiplet_blocks():
    blocks = multiplet_blocks(np.array([1.0, 0.5, 0.5, -0.5, 0.1]), 1e-8)
    assert [list(b) for b in blocks] == [[0], [1, 2], [3], [4]]


def test_apply_gauge_inverse(rng):
    T = hermitian_edge(rng, 4, 2)
    sigma = np.linalg.qr(rng.standard_normal((4, 4)))[0]
    assert np.max(np.abs(apply_gauge(planted(T, sigma), sigma) - T)) <= 1e-14


class TestPhases:
    def test_identity(self, rng):
        T = hermitian_edge(rng, 5, 3)
        C = corner_with_multiplets(rng, [1] * 5)
        g = fix_gauge_phases(T, T, C)
        np.testing.assert_allclose(g.sigma, np.eye(5), atol=1e-14)

    def test_planted_signs(self, rng):
        T = hermitian_edge(rng, 6, 2, real=True)
        C = corner_with_multiplets(rng, [1] * 6)
        delta = np.diag([1.0, -1, 1, -1, -1, 1])
        g = fix_gauge_phases(planted(T, delta), T, C)
        np.testing.assert_allclose(g.sigma, delta, atol=1e-14)
        assert g.residual <= 1e-12

    def test_sparse_row_needs_second_pass(self, rng):
        chi = 5
        T = hermitian_edge(rng, chi, 2)
        # index 0 couples only to index 4, so everything else is reached through 4
        T[0, :, 1:4] = 0
        T[1:4, :, 0] = 0
        C = corner_with_multiplets(rng, [1] * chi)
        delta = np.diag(np.exp(1j * rng.uniform(0, 6, chi)))
        delta /= delta[0, 0]
        g = fix_gauge_phases(planted(T, delta), T, C)
        np.testing.assert_allclose(g.sigma, delta, atol=1e-12)

    def test_degenerate_corner_inapplicable(self, rng):
        T = hermitian_edge(rng, 4, 2)
        with pytest.raises(SchemeInapplicableError):
            fix_gauge_phases(T, T, corner_with_multiplets(rng, [2, 1, 1]))

    def test_disconnected_fails(self, rng):
        T = hermitian_edge(rng, 4, 2)
        T[:2, :, 2:] = 0
        T[2:, :, :2] = 0
        with pytest.raises(GaugeFixingError):
            fix_gauge_phases(T, T, corner_with_multiplets(rng, [1] * 4))


class TestTransfer:
    def test_identity(self, rng):
        T = hermitian_edge(rng, 5, 3)
        g = fix_gauge_transfer(T, T, seed=0)
        assert np.max(np.abs(g.sigma - np.eye(5))) <= 1e-10

    def test_planted_degenerate(self):
        T_hat, T, C = degenerate_case(3)
        check(fix_gauge_transfer(T_hat, T, seed=0, C=C), T_hat, T, C)

    def test_two_seeds(self):
        T_hat, T, C = degenerate_case(5)
        for seed in (1, 2):
            check(fix_gauge_transfer(T_hat, T, seed=seed, C=C), T_hat, T, C)

    def test_bond_below_chi(self, rng):
        T = hermitian_edge(rng, 4, 2)
        with pytest.raises(ValueError):
            fix_gauge_transfer(T, T, bond=2)


class TestRobust:
    def test_identity_nondegenerate(self, rng):
        T = hermitian_edge(rng, 5, 2)
        C = corner_with_multiplets(rng, [1] * 5)
        g = fix_gauge_robust(T, T, C)
        assert g.residual <= 1e-10
        assert np.max(np.abs(g.sigma - np.diag(np.diag(g.sigma)))) <= 1e-10

    def test_planted_block(self):
        T_hat, T, C = degenerate_case(7)
        check(fix_gauge_robust(T_hat, T, C), T_hat, T, C)

    def test_virtual_symmetry(self):
        T_hat, T, C = symmetric_case(2)
        g = fix_gauge_robust(T_hat, T, C)
        assert g.nullspace_dim > 1
        check(g, T_hat, T, C)

    def test_nullspace_dimension(self):
        _, T, C = symmetric_case(4)
        assert len(gauge_nullspace(T, T, blocks_of(C))) == 2

    def test_unrelated_edges(self, rng):
        C = corner_with_multiplets(rng, [1] * 4)
        with pytest.raises(GaugeFixingError, match="not gauge related"):
            fix_gauge_robust(hermitian_edge(rng, 4, 3), hermitian_edge(rng, 4, 3), C)

    def test_agrees_with_phases(self):
        T_hat, T, C = phases_case(10)
        g1 = fix_gauge_phases(T_hat, T, C)
        g2 = fix_gauge_robust(T_hat, T, C)
        # both fix the same gauge up to a global phase
        ph = g1.sigma[0, 0] / g2.sigma[0, 0]
        assert np.max(np.abs(g1.sigma - ph * g2.sigma)) <= 1e-9


class TestCascade:
    def test_falls_back_and_logs(self, caplog):
        T_hat, T, C = degenerate_case(11)
        with caplog.at_level(logging.INFO, logger="ctmgrad.gauge"):
            g = fix_gauge_cascade(T_hat, T, C)
        assert g.scheme in ("transfer", "robust")
        rec = json.loads(caplog.records[-1].getMessage())
        assert set(rec) == {"scheme", "residual", "unitarity_residual", "commutant_residual",
                            "nullspace_dim"}

    def test_all_fail(self, rng):
        C = corner_with_multiplets(rng, [1] * 4)
        with pytest.raises(GaugeFixingError, match="more CTM iterations"):
            fix_gauge_cascade(hermitian_edge(rng, 4, 3), hermitian_edge(rng, 4, 3), C)


class TestFixEnvironment:
    def test_already_fixed(self, rng):
        T = hermitian_edge(rng, 4, 4, real=True)
        C = corner_with_multiplets(rng, [1] * 4)
        env = Environment(C, T)
        out = fix_environment(env, env)
        np.testing.assert_allclose(out.gauge.sigma, np.eye(4), atol=1e-14)

    def test_random_peps_end_to_end(self, rng):
        A = build_ansatz(AnsatzSpec("random_c4v", D=2, d=2, seed=0))
        res = converge_ctm(A, 8, tol=1e-12)
        out = fix_environment(res.env_prev, res.env)
        assert np.max(np.abs(out.T - res.env_prev.T)) <= 1e-9
        # the same step output in a scrambled phase gauge
        sigma = np.diag(np.exp(1j * rng.uniform(0, 2 * np.pi, res.env.chi)))
        scrambled = Environment(res.env.C, apply_gauge(res.env.T, sigma))
        assert np.max(np.abs(scrambled.T - res.env_prev.T)) > 1e-3
        out = fix_environment(res.env_prev, scrambled)
        assert np.max(np.abs(out.T - res.env_prev.T)) <= 1e-9

    def test_su2_ansatz_degenerate_corner(self):
        A = build_ansatz(AnsatzSpec("nn_rvb_perturbed", beta=0.0))
        res = converge_ctm(A, 16, tol=1e-12)
        blocks = multiplet_blocks(res.env.spectrum, 1e-8)
        assert any(len(b) > 1 for b in blocks)
        g = fix_gauge_robust(res.env_prev.T, res.env.T, res.env.C)
        assert g.residual <= 1e-8
        out = fix_environment(res.env_prev, res.env)
        assert out.gauge.scheme != "phases"
        assert np.max(np.abs(out.T - res.env_prev.T)) <= 1e-8


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_property_cascade_recovers_planted(seed):
    T_hat, T, C = degenerate_case(seed, real=bool(seed % 2))
    g = fix_gauge_cascade(T_hat, T, C)
    check(g, T_hat, T, C)
