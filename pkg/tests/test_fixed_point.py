import numpy as np
import pytest

from ctmgrad.adrules import GradMode
from ctmgrad.ctm import Environment, converge_ctm, symmetrize_edge
from ctmgrad.errors import SeriesDivergenceError, StageError
from ctmgrad.fixed_point import (GradOptions, _tail_factor, gradient_energy, make_primal,
                                 solve_fixed_point_adjoint, vjp_ctm_step)
from ctmgrad.gauge import fix_environment
from ctmgrad.models import (AnsatzSpec, Hamiltonian, build_ansatz, build_hamiltonian, energy,
                            energy_vjp, finite_diff_gradient)
from ctmgrad.tensor import c4v_asymmetry, c4v_symmetrize

from conftest import crandn, fd_directional

CHI = 6


def rel_inf(a, b):
    return float(np.max(np.abs(a - b)) / np.max(np.abs(b)))


@pytest.fixture(scope="module")
def setup():
    A = build_ansatz(AnsatzSpec("random_c4v", D=2, d=2, seed=0))
    res = converge_ctm(A, CHI, tol=1e-13)
    env = fix_environment(res.env_prev, res.env)
    primal = make_primal(env, A, res.eig.P @ env.gauge.sigma.conj().T)
    return A, res, env, primal


def hermitian_direction(rng, env):
    dC = crandn(rng, *env.C.shape)
    dC = dC + dC.conj().T
    return dC, symmetrize_edge(crandn(rng, *env.T.shape))


class TestStepVJP:
    def test_primal_reproduces_fixed_point(self, setup):
        assert setup[3].fixed_point_residual <= 1e-9

    def test_zero_in_zero_out(self, setup):
        primal = setup[3]
        out = vjp_ctm_step(primal, np.zeros_like(primal.env.C), np.zeros_like(primal.env.T))
        assert all(not np.any(x) for x in out)

    def test_real_linearity(self, rng, setup):
        primal = setup[3]
        g1 = hermitian_direction(rng, primal.env)
        g2 = hermitian_direction(rng, primal.env)
        a, b = 0.7, -1.3
        lhs = vjp_ctm_step(primal, a * g1[0] + b * g2[0], a * g1[1] + b * g2[1])
        r1 = vjp_ctm_step(primal, *g1)
        r2 = vjp_ctm_step(primal, *g2)
        for x, y, z in zip(lhs, r1, r2):
            np.testing.assert_allclose(x, a * y + b * z, atol=1e-10 * np.max(np.abs(x)))

    def test_directional_derivative(self, rng, setup):
        A, _, env, primal = setup
        P_ref = primal.P
        GC, GT = hermitian_direction(rng, env)
        dC, dT = hermitian_direction(rng, env)
        dA = c4v_symmetrize(rng.standard_normal(A.shape))

        def f(x):
            e = Environment(env.C + x * dC, env.T + x * dT)
            out = make_primal(e, A + x * dA, P_ref).env_out
            return float(np.real(np.vdot(GC, out.C) + np.vdot(GT, out.T)))

        fd = fd_directional(f, h_values=(1e-4, 5e-5, 2.5e-5))
        GCi, GTi, GA = vjp_ctm_step(primal, GC, GT)
        ad = float(np.real(np.vdot(GCi, dC) + np.vdot(GTi, dT) + np.vdot(GA, dA)))
        assert abs(fd - ad) <= 1e-7 * max(abs(fd), 1.0)


class TestTailFactor:
    def test_geometric_history(self):
        hist = [0.9**k for k in range(30)]
        assert _tail_factor(hist, 10) == pytest.approx(9.0, rel=1e-12)

    def test_fast_decay_floors_at_one(self):
        assert _tail_factor([1.0, 1e-3], 10) == 1.0

    def test_no_estimate_without_decay(self):
        assert _tail_factor([1.0], 10) == np.inf
        assert _tail_factor([1.0, 1.0, 1.1], 10) == np.inf
        assert _tail_factor([0.0, 1.0], 10) == np.inf


class TestAdjointSeries:
    def test_zero_cotangent(self, setup):
        primal = setup[3]
        r = solve_fixed_point_adjoint(primal, np.zeros_like(primal.env.C),
                                      np.zeros_like(primal.env.T))
        assert not np.any(r.G_A) and r.iterations == 1

    def test_series_matches_gmres(self, setup):
        A, _, env, primal = setup
        _, G_C, G_T, _ = energy_vjp(env, A, build_hamiltonian(0.1))
        s = solve_fixed_point_adjoint(primal, G_C, G_T, tol=1e-12, maxiter=2000)
        g = solve_fixed_point_adjoint(primal, G_C, G_T, tol=1e-12, maxiter=2000, method="gmres")
        assert rel_inf(s.G_A, g.G_A) <= 1e-9

    def test_doubling_maxiter_is_consistent(self, setup):
        A, _, env, primal = setup
        _, G_C, G_T, _ = energy_vjp(env, A, build_hamiltonian(0.1))
        a = solve_fixed_point_adjoint(primal, G_C, G_T, maxiter=500)
        b = solve_fixed_point_adjoint(primal, G_C, G_T, maxiter=1000)
        assert a.iterations == b.iterations
        assert np.array_equal(a.G_A, b.G_A)

    def test_increments_decay(self, setup):
        A, _, env, primal = setup
        _, G_C, G_T, _ = energy_vjp(env, A, build_hamiltonian(0.1))
        r = solve_fixed_point_adjoint(primal, G_C, G_T)
        assert r.history[-1] < 1e-6 * r.history[0]

    @pytest.mark.parametrize("tol", [1e-6, 1e-9])
    def test_projected_stop_bounds_the_error(self, setup, tol):
        A, _, env, primal = setup
        _, G_C, G_T, G_A0 = energy_vjp(env, A, build_hamiltonian(0.1))

        def proj(x):
            return c4v_symmetrize(np.real(x))

        ref = solve_fixed_point_adjoint(primal, G_C, G_T, tol=1e-14, method="gmres").G_A
        r = solve_fixed_point_adjoint(primal, G_C, G_T, tol=tol, project=proj, base=G_A0)
        assert rel_inf(proj(G_A0 + r.G_A), proj(G_A0 + ref)) <= tol

    def test_too_few_iterations(self, setup):
        A, _, env, primal = setup
        _, G_C, G_T, _ = energy_vjp(env, A, build_hamiltonian(0.1))
        with pytest.raises(SeriesDivergenceError):
            solve_fixed_point_adjoint(primal, G_C, G_T, maxiter=2)

    def test_unknown_method(self, setup):
        primal = setup[3]
        with pytest.raises(ValueError):
            solve_fixed_point_adjoint(primal, primal.env.C, primal.env.T, method="newton")

    def test_d1_terminates(self):
        A = np.zeros((2, 1, 1, 1, 1))
        A[0] = 1.0
        A[1] = 0.5
        r = gradient_energy(A, build_hamiltonian(0.0), 2)
        assert r.series_iters <= 3
        assert np.all(np.isfinite(r.grad))


class TestGradient:
    def test_energy_matches_forward(self, setup):
        A, res, _, _ = setup
        H = build_hamiltonian(0.1)
        r = gradient_energy(A, H, CHI, converged=res)
        assert abs(r.energy - energy(res.env, res.eig, A, H)) <= 1e-12

    def test_zero_hamiltonian(self, setup):
        A, res, _, _ = setup
        r = gradient_energy(A, Hamiltonian(j1=0.0), CHI, converged=res)
        assert not np.any(r.grad)

    def test_grad_is_symmetric_and_real(self, setup):
        A, res, _, _ = setup
        r = gradient_energy(A, build_hamiltonian(0.1), CHI, converged=res)
        assert not np.iscomplexobj(r.grad)
        assert c4v_asymmetry(r.grad) <= 1e-15

    def test_against_finite_differences(self):
        A = build_ansatz(AnsatzSpec("random_c4v", D=2, d=2, seed=0))
        H = build_hamiltonian(0.0)
        r = gradient_energy(A, H, 8)
        fd = finite_diff_gradient(A, H, 8, ctm_tol=1e-12)
        assert rel_inf(r.grad, fd) <= 1e-8

    def test_default_solve_on_slow_series(self):
        # series contracts at ~0.96 per step and the projected gradient is
        # ~60x smaller than the raw cotangent
        A = build_ansatz(AnsatzSpec("nn_rvb_perturbed", beta=1e-3))
        H = build_hamiltonian(1e-3)
        res = converge_ctm(A, 16, tol=1e-14, maxiter=20000)
        r = gradient_energy(A, H, 16, converged=res)
        ref = gradient_energy(A, H, 16, converged=res,
                              opts=GradOptions(method="gmres", series_tol=1e-14,
                                               sylvester_tol=1e-14))
        assert rel_inf(r.grad, ref.grad) <= 1e-8

    def test_init_and_seed_invariance(self, setup):
        A = setup[0]
        H = build_hamiltonian(0.1)
        ref = gradient_energy(A, H, CHI).grad
        for seed in (1, 2):
            g = gradient_energy(A, H, CHI, opts=GradOptions(init="random", seed=seed)).grad
            assert rel_inf(g, ref) <= 1e-10

    def test_approximate_modes_deviate(self, setup):
        A, res, _, _ = setup
        H = build_hamiltonian(0.1)
        exact = gradient_energy(A, H, CHI, converged=res).grad
        for mode in (GradMode("dp_zero"), GradMode("lorentzian", 1e-12)):
            approx = gradient_energy(A, H, CHI, mode=mode, converged=res).grad
            assert rel_inf(approx, exact) > 1e-6

    def test_stage_named_on_failure(self, setup):
        A, res, _, _ = setup
        with pytest.raises(StageError) as info:
            gradient_energy(A, build_hamiltonian(0.1), CHI, converged=res,
                            opts=GradOptions(series_maxiter=2))
        assert info.value.stage == "fixed-point"
