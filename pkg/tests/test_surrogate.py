import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from scipy import integrate, stats as sstats

from baygds import surrogate as sg
from baygds.features import NormalizationStats
from baygds.mechanics import build_schedule, observation_matrix, softplus
from baygds.surrogate import GpHyperparams, SurrogateConfig


def random_hyper(rng, n_r=3, n_z=4, k=3):
    return GpHyperparams(np.exp(rng.uniform(-1.5, 1.5, (n_r, n_z))), rng.normal(0, 1, (n_r, k)),
                         rng.uniform(0.0, 0.5, n_r), 0.01)


def make_model(N=3, n_z=2, k=3, seed=0, config=None, schedule=None, random_params=True):
    """Small model with non-trivial parameters and synthetic standardized data."""
    rng = np.random.default_rng(seed)
    config = config or SurrogateConfig(n_theta=k, mc_samples=8)
    sched = schedule or build_schedule(paths=["Tension-x", "Equibiaxial"], n_increments=2, include_identity=False)
    A = observation_matrix(sched)[:, :k]
    n_f = len(sched)
    stats = NormalizationStats(np.zeros(n_z), np.ones(n_z), rng.uniform(0.5, 1.5, (n_f, 2)),
                               rng.uniform(0.5, 2.0, (n_f, 2)))
    Z = rng.standard_normal((N, n_z))
    data = sg.TrainingSet(np.arange(1, N + 1), Z, rng.standard_normal((N, 2 * n_f)))
    params = sg.init_params(N, n_z, config, rng)
    if random_params:
        D = N * k
        params["log_lengthscale"] = rng.normal(0, 0.3, params["log_lengthscale"].shape)
        params["raw_kappa"] = rng.normal(0, 0.5, params["raw_kappa"].shape)
        params["log_noise_var"] = np.array(-1.0)
        params["mu"] = rng.normal(0, 0.7, D)
        params["chol_offdiag"] = np.tril(rng.normal(0, 0.1, (D, D)), -1)
        params["chol_logdiag"] = rng.normal(-1.0, 0.2, D)
    return sg.SurrogateModel(config, params, data, A, stats)


class TestKernel:
    def test_self(self):
        assert sg.ard_se_kernel([0.3, 1.0], [0.3, 1.0], [2.0, 0.5]) == 1.0

    def test_one_lengthscale_offset(self):
        ls = np.array([0.7, 2.0, 1.3])
        assert sg.ard_se_kernel(np.zeros(3), [0.7, 0, 0], ls) == pytest.approx(math.exp(-0.5), abs=1e-15)
        assert sg.ard_se_kernel(np.zeros(3), [0.7, 0, 0], ls) == pytest.approx(0.606531, abs=1e-6)

    def test_monotone_decay(self):
        vals = [sg.ard_se_kernel([0.0], [r], [1.0]) for r in (0.0, 0.5, 1, 2, 5, 40)]
        assert all(a > b for a, b in zip(vals, vals[1:]))
        assert vals[-1] < 1e-300


class TestLmc:
    def test_independent_outputs(self):
        Z = np.random.default_rng(0).standard_normal((4, 2))
        h = GpHyperparams(np.array([[0.8, 1.5]]), np.zeros((1, 3)), np.array([1.0]))
        K = np.array([[sg.ard_se_kernel(a, b, h.lengthscales[0]) for b in Z] for a in Z])
        assert np.allclose(sg.lmc_covariance(Z, Z, h), np.kron(K, np.eye(3)), atol=1e-15)

    def test_all_ones_block(self):
        h = GpHyperparams(np.ones((1, 2)), np.ones((1, 3)), np.zeros(1))
        assert np.array_equal(sg.lmc_covariance([[0.1, 0.2]], [[0.1, 0.2]], h), np.ones((3, 3)))

    def test_psd_random_hyper(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            h = random_hyper(rng)
            Z = rng.standard_normal((8, 4))
            K = sg.lmc_covariance(Z, Z, h)
            assert np.max(np.abs(K - K.T)) <= 1e-12
            assert np.linalg.eigvalsh(K).min() >= -1e-8

    def test_cross_transpose(self):
        rng = np.random.default_rng(1)
        h = random_hyper(rng)
        Za, Zb = rng.standard_normal((3, 4)), rng.standard_normal((5, 4))
        assert np.allclose(sg.lmc_covariance(Za, Zb, h), sg.lmc_covariance(Zb, Za, h).T, atol=1e-15)

    def test_torch_matches_numpy(self):
        rng = np.random.default_rng(2)
        h = random_hyper(rng)
        Z = rng.standard_normal((5, 4))
        raw = sg._inv_softplus(np.maximum(h.kappa, 1e-9))
        Kt = sg._lmc_t(torch.tensor(Z), torch.tensor(Z), torch.tensor(np.log(h.lengthscales)), torch.tensor(h.mixing),
                       torch.tensor(raw)).numpy()
        h2 = GpHyperparams(h.lengthscales, h.mixing, softplus(raw))
        assert np.allclose(Kt, sg.lmc_covariance(Z, Z, h2), atol=1e-12)


class TestPrior:
    def test_mean_and_marginal_variance(self):
        rng = np.random.default_rng(3)
        h = random_hyper(rng)
        mean, K, L = sg.gp_prior(rng.standard_normal((6, 4)), h)
        assert not mean.any()
        expected = (h.mixing**2).sum(0) + h.kappa.sum()
        assert np.allclose(sg.prior_marginal_variance(h), expected)
        assert np.allclose(np.diag(sg.lmc_covariance(np.zeros((1, 4)), np.zeros((1, 4)), h)), expected)

    def test_sample_covariance(self):
        rng = np.random.default_rng(4)
        h = random_hyper(rng, n_z=2)
        Z = rng.standard_normal((2, 2))
        _, K, L = sg.gp_prior(Z, h)
        draws = rng.standard_normal((10_000, len(K))) @ L.T
        C = np.cov(draws.T)
        scale = np.sqrt(np.outer(np.diag(K), np.diag(K)))
        assert np.max(np.abs(C - K) / scale) <= 0.05

    def test_jitter_escalation_and_failure(self):
        K = np.ones((3, 3))
        L, j = sg.cholesky_jitter(K)
        assert j > 0 and np.allclose(L @ L.T, K + j * np.eye(3))
        with pytest.raises(sg.CholeskyError):
            sg.cholesky_jitter(-np.eye(3))


class TestLikelihoodAndKl:
    def test_zero_residual(self):
        A = np.array([[1.0, 0.5], [0.0, 2.0], [1.0, 1.0]])
        xi = np.array([0.3, -0.2])
        y = A @ softplus(xi) - 0.1
        s2 = 0.3
        assert sg.log_likelihood(y, xi, s2, A, np.full(3, 0.1)) == pytest.approx(-1.5 * math.log(2 * math.pi * s2))

    def test_two_term_toy(self):
        val = sg.log_likelihood([1.0, 0.0], [0.0], 1.0, np.zeros((2, 1)), np.zeros(2))
        assert val == pytest.approx(-math.log(2 * math.pi) - 0.5, abs=1e-14)

    def test_kl_identical(self):
        rng = np.random.default_rng(5)
        h = random_hyper(rng)
        _, _, L = sg.gp_prior(rng.standard_normal((4, 4)), h)
        assert abs(sg.kl_gaussians(np.zeros(12), L, np.zeros(12), L)) <= 1e-8

    def test_kl_mean_shift(self):
        rng = np.random.default_rng(6)
        h = random_hyper(rng)
        _, K, L = sg.gp_prior(rng.standard_normal((3, 4)), h)
        mu = rng.standard_normal(9)
        assert sg.kl_gaussians(mu, L, np.zeros(9), L) == pytest.approx(0.5 * mu @ np.linalg.solve(K, mu), rel=1e-8)

    def test_kl_scalar(self):
        val = sg.kl_gaussians([1.0], [[math.sqrt(2.0)]], [0.0], [[1.0]])
        assert val == pytest.approx(0.5 * (2 + 1 - 1 - math.log(2)), abs=1e-14)
        assert val == pytest.approx(0.653426, abs=1e-6)

    def test_kl_rejects_bad_factor(self):
        with pytest.raises(sg.SurrogateError):
            sg.kl_gaussians([0.0], [[-1.0]], [0.0], [[1.0]])


class TestElbo:
    def test_matches_numpy_reference(self):
        m = make_model(N=3, seed=1)
        obj = m.objective()
        eps = obj.draw(5, torch.Generator().manual_seed(3))
        with torch.no_grad():
            val = float(obj(sg._to_torch(m.params, grad=False), eps))
        post, LO = m.posterior, m.prior_chol()
        xi = post.mean + eps.numpy() @ post.chol.T
        ll = np.mean([sum(sg.log_likelihood(m.data.Y[i], x.reshape(3, 3)[i], m.hyper.noise_var, m.obs_matrix_std,
                                            m.offset_std) for i in range(3)) for x in xi])
        ref = ll - sg.kl_gaussians(post.mean, post.chol, np.zeros(9), LO)
        assert val == pytest.approx(ref, rel=1e-9)

    def test_concentrated_limit(self):
        m = make_model(N=3, seed=2)
        xi = m.params["mu"].reshape(3, 3)
        m.data.Y[:] = np.stack([m.obs_matrix_std @ softplus(x) - m.offset_std for x in xi])
        m.params["chol_logdiag"] = np.full(9, -12.0)
        m.params["chol_offdiag"] = np.zeros((9, 9))
        obj = m.objective()
        p = sg._to_torch(m.params, grad=False)
        with torch.no_grad():
            eps = obj.draw(4, torch.Generator().manual_seed(0))
            L = sg._chol_factor_t(p, "full")
            theta = sg._softplus_t(p["mu"] + eps @ L.T).reshape(4, 3, 3)
            sq = obj.yy - 2 * (theta * obj.Aty).sum(-1) + ((theta @ obj.AtA) * theta).sum(-1)
            ll = -0.5 * m.data.Y.size * np.log(2 * np.pi * m.hyper.noise_var) - 0.5 * float(sq.sum(1).mean()) / m.hyper.noise_var
        assert ll == pytest.approx(-0.5 * m.data.Y.size * np.log(2 * np.pi * m.hyper.noise_var), rel=1e-8)

    def test_mc_consistency(self):
        m = make_model(N=3, seed=4)
        single = np.array([sg.elbo(m, n_samples=1, seed=s) for s in range(100)])
        many = sg.elbo(m, n_samples=64, seed=1000)
        se = single.std(ddof=1) / math.sqrt(len(single))
        assert abs(single.mean() - many) <= 4 * se + single.std(ddof=1) / 8 * 4

    def test_gradient_finite_differences(self):
        m = make_model(N=3, seed=5)
        eps = m.objective().draw(16, torch.Generator().manual_seed(9)).numpy()
        _, grad = sg.elbo_and_grad(m, eps)
        obj = m.objective()
        et = torch.as_tensor(eps)

        def f(params):
            with torch.no_grad():
                return float(obj(sg._to_torch(params, grad=False), et))

        h = 1e-6
        worst = 0.0
        for name in sg.PARAM_NAMES:
            base = m.params[name]
            for idx in np.ndindex(base.shape):
                if name == "chol_offdiag" and idx[1] >= idx[0]:
                    assert grad[name][idx] == 0.0
                    continue
                up = {k: v.copy() for k, v in m.params.items()}
                dn = {k: v.copy() for k, v in m.params.items()}
                up[name][idx] += h
                dn[name][idx] -= h
                fd = (f(up) - f(dn)) / (2 * h)
                g = grad[name][idx]
                worst = max(worst, abs(fd - g) / max(abs(g), abs(fd), 1e-2))
        assert worst <= 1e-4


class TestTraining:
    def test_deterministic_and_improving(self):
        m = make_model(N=4, seed=6, random_params=False)
        cfg = SurrogateConfig(mc_samples=8, steps=60, restart_period=30)
        a = sg.train(m.data, m.obs_matrix, m.stats, cfg, seed=3)
        b = sg.train(m.data, m.obs_matrix, m.stats, cfg, seed=3)
        for k in a.params:
            assert np.array_equal(a.params[k], b.params[k])
        assert a.history == b.history
        start = m.with_params(sg.init_params(4, 2, cfg, np.random.default_rng(3)))
        assert sg.elbo(a, seed=99) >= sg.elbo(start, seed=99)

    def test_diag_variational(self):
        m = make_model(N=3, seed=7, random_params=False)
        cfg = SurrogateConfig(mc_samples=4, steps=20, variational="diag")
        out = sg.train(m.data, m.obs_matrix, m.stats, cfg)
        assert np.count_nonzero(np.tril(out.posterior.chol, -1)) == 0

    def test_divergence_reported(self):
        m = make_model(N=3, seed=8, random_params=False)
        m.data.Y[0, 0] = np.nan
        with pytest.raises(sg.TrainingError, match="diverged"):
            sg.train(m.data, m.obs_matrix, m.stats, SurrogateConfig(mc_samples=4, steps=5))

    def test_empty(self):
        m = make_model(N=3, seed=8)
        empty = sg.TrainingSet(np.zeros(0, int), np.zeros((0, 2)), np.zeros((0, 8)))
        with pytest.raises(sg.TrainingError):
            sg.train(empty, m.obs_matrix, m.stats)


def one_output_model(Z, mu, chol, ls=0.9, b=1.7):
    config = SurrogateConfig(n_r=1, n_theta=1)
    N = len(Z)
    params = {"log_lengthscale": np.full((1, Z.shape[1]), np.log(ls)), "mixing": np.array([[math.sqrt(b)]]),
              "raw_kappa": np.array([-60.0]), "log_noise_var": np.array(0.0), "mu": np.asarray(mu, float),
              "chol_offdiag": np.tril(chol, -1), "chol_logdiag": np.log(np.diag(chol))}
    stats = NormalizationStats(np.zeros(Z.shape[1]), np.ones(Z.shape[1]), np.zeros((1, 2)), np.ones((1, 2)))
    data = sg.TrainingSet(np.arange(1, N + 1), Z, np.zeros((N, 2)))
    return sg.SurrogateModel(config, params, data, np.ones((2, 1)), stats)


class TestConditioning:
    def test_two_point_hand(self):
        Z = np.array([[0.0], [0.8]])
        zs = np.array([[0.3]])
        b, ls = 1.7, 0.9
        mu = np.array([0.4, -0.6])
        Lq = np.array([[0.3, 0.0], [0.1, 0.2]])
        m = one_output_model(Z, mu, Lq, ls, b)
        m.prior_chol()
        j = m._cache["jitter"]
        k = lambda a, c: b * math.exp(-0.5 * (a - c) ** 2 / ls**2)
        o11, o12, o22 = k(0, 0) + j, k(0, 0.8), k(0.8, 0.8) + j
        det = o11 * o22 - o12**2
        inv = np.array([[o22, -o12], [-o12, o11]]) / det
        ks = np.array([k(0, 0.3), k(0.8, 0.3)])
        w = inv @ ks
        Sigma = Lq @ Lq.T
        Om = np.array([[o11, o12], [o12, o22]])
        mean = w @ mu
        var = b + w @ (Sigma - Om) @ w
        for marginal in (True, False):
            lat = sg.predict_latent(m, zs, marginal=marginal)
            assert lat.mean[0, 0] == pytest.approx(mean, abs=1e-10)
            assert lat.blocks()[0, 0, 0] == pytest.approx(var, abs=1e-10)

    def test_prior_reduction(self):
        rng = np.random.default_rng(12)
        h = random_hyper(rng, n_z=2)
        Z, Zs = rng.standard_normal((4, 2)), rng.standard_normal((3, 2))
        m = make_model(N=4, seed=12)
        m.data.Z[:] = Z
        m.params.update(log_lengthscale=np.log(h.lengthscales[:, :2]), mixing=h.mixing,
                        raw_kappa=sg._inv_softplus(np.maximum(h.kappa, 1e-6)))
        LO = m.prior_chol()
        m.params.update(mu=np.zeros(12), chol_offdiag=np.tril(LO, -1), chol_logdiag=np.log(np.diag(LO)))
        lat = sg.predict_latent(m, Zs, marginal=False)
        assert np.max(np.abs(lat.mean)) <= 1e-12
        assert np.max(np.abs(lat.cov - sg.lmc_covariance(Zs, Zs, m.hyper))) <= 1e-8

    def test_interpolation(self):
        m = make_model(N=4, seed=13)
        m.params["chol_logdiag"] = np.full(12, -20.0)
        m.params["chol_offdiag"] = np.zeros((12, 12))
        lat = sg.predict_latent(m, m.data.Z)
        assert np.allclose(lat.mean.ravel(), m.params["mu"], atol=1e-6)

    def test_marginal_matches_full(self):
        m = make_model(N=4, seed=14)
        Zs = np.random.default_rng(0).standard_normal((5, 2))
        full, marg = sg.predict_latent(m, Zs, marginal=False), sg.predict_latent(m, Zs, chunk=2)
        assert np.allclose(full.mean, marg.mean, atol=1e-12)
        assert np.allclose(full.blocks(), marg.blocks(), atol=1e-10)
        assert np.allclose(marg.subset([1, 3]).cov, marg.cov[[1, 3]])


class TestPushforward:
    def test_degenerate_latent(self):
        lat = sg.PredictiveLatent(np.array([[0.2, -1.0, 3.0]]), np.zeros((1, 3, 3)))
        A = np.random.default_rng(0).standard_normal((4, 3))
        mean, var = sg.pushforward_stress(lat, A, 16)
        assert np.allclose(mean[0], A @ softplus(lat.mean[0]), atol=1e-13)
        assert np.array_equal(var, np.zeros((1, 4)))

    def test_identity_state(self):
        sched = build_schedule(paths=["Tension-x"], n_increments=2)
        A = observation_matrix(sched)
        lat = sg.PredictiveLatent(np.zeros((2, 3)), np.tile(np.eye(3), (2, 1, 1)))
        mean, var = sg.pushforward_stress(lat, A, 64, np.random.default_rng(1))
        assert np.array_equal(mean[:, :2], np.zeros((2, 2))) and np.array_equal(var[:, :2], np.zeros((2, 2)))
        assert np.all(var[:, 2:] > 0)

    def test_softplus_gaussian_expectation(self):
        exact, _ = integrate.quad(lambda x: softplus(x) * sstats.norm.pdf(x), -40, 40, epsabs=1e-13)
        lat = sg.PredictiveLatent(np.zeros((1, 1)), np.ones((1, 1, 1)))
        S = 4096
        mean, var = sg.pushforward_stress(lat, np.ones((1, 1)), S, np.random.default_rng(2))
        assert abs(mean[0, 0] - exact) <= 3 * math.sqrt(var[0, 0] / S)
        assert mean[0, 0] > math.log(2)  # Jensen gap of a convex map

    def test_variance_matches_direct(self):
        rng = np.random.default_rng(3)
        B = rng.standard_normal((2, 3, 3))
        lat = sg.PredictiveLatent(rng.standard_normal((2, 3)), np.einsum("iab,icb->iac", B, B))
        A = rng.standard_normal((5, 3))
        mean, var = sg.pushforward_stress(lat, A, 32, np.random.default_rng(9))
        draws = softplus(sg.sample_latent(lat, 32, np.random.default_rng(9))) @ A.T
        assert np.allclose(mean, draws.mean(0), atol=1e-12)
        assert np.allclose(var, draws.var(0, ddof=1), atol=1e-10)

    def test_needs_two_samples(self):
        with pytest.raises(ValueError):
            sg.pushforward_stress(sg.PredictiveLatent(np.zeros((1, 1)), np.ones((1, 1, 1))), np.ones((1, 1)), 1)

    def test_point_estimate(self):
        assert np.allclose(sg.point_estimate_params(np.zeros(3)), math.log(2))
        assert sg.point_estimate_params(np.array([40.0]))[0] == pytest.approx(40.0, rel=1e-12)


class TestWarmStartAndPersistence:
    def test_expand_keeps_old_and_matches_prediction(self):
        m = make_model(N=3, seed=15)
        Znew = np.random.default_rng(1).standard_normal((2, 2))
        p = sg.expand_params(m, Znew)
        assert np.array_equal(p["mu"][:9], m.params["mu"])
        lat = sg.predict_latent(m, Znew, marginal=False)
        assert np.allclose(p["mu"][9:], lat.mean.ravel(), atol=1e-10)
        L = np.tril(p["chol_offdiag"], -1) + np.diag(np.exp(p["chol_logdiag"]))
        assert np.allclose((L @ L.T)[9:, 9:], lat.cov, atol=1e-6)

    def test_save_load(self, tmp_path):
        m = make_model(N=3, seed=16)
        m.meta = {"seed": 1}
        sg.save_model(tmp_path / "m.bin", m, {"stamp": "abc"})
        back = sg.load_model(tmp_path / "m.bin")
        assert back.meta["stamp"] == "abc" and back.config == m.config
        for k in m.params:
            assert np.array_equal(back.params[k], m.params[k])
        Zs = np.random.default_rng(2).standard_normal((3, 2))
        assert np.array_equal(sg.predict_latent(back, Zs).mean, sg.predict_latent(m, Zs).mean)
