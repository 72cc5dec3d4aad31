"""Multi-output GP surrogate for the latent material parameters.

Latent outputs xi(z) in R^{n_theta} share an LMC prior,

    Omega(z, z') = sum_r (a_r a_r^T + kappa_r I) k_r(z, z'),

with ARD squared-exponential k_r.  A full-covariance Gaussian q(xi) over the
training designs is fitted jointly with the hyperparameters and the noise
variance by maximizing a Monte-Carlo ELBO (reparameterized draws, autograd
through torch in float64).  The observation model is linear in theta =
softplus(xi), so the stress map enters only through a fixed matrix
(`obs_matrix`) built by `mechanics.observation_matrix`.

Vectors over designs are ordered design-major: index i * n_theta + m.
"""
from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch

from ._blob import read_blob, write_blob
from .features import NormalizationStats
from .mechanics import softplus, softplus_inverse

MODEL_MAGIC = b"BGMD"
MODEL_VERSION = 1
_SP_BRANCH = 30.0

torch_dtype = torch.float64


class SurrogateError(RuntimeError):
    pass


class CholeskyError(SurrogateError):
    pass


class TrainingError(SurrogateError):
    pass


@dataclass
class SurrogateConfig:
    n_r: int = 3
    n_theta: int = 3
    mc_samples: int = 64
    steps: int = 1500
    restart_period: int = 500
    lr: float = 0.03
    lr_min_factor: float = 0.01
    ema: float = 0.95
    seed: int = 0
    variational: str = "full"  # or "diag"
    jitter_start: float = 1e-8
    jitter_max: float = 1e-4
    init_lengthscale: float = 1.0
    init_mixing_std: float = 0.1
    init_kappa: float = 0.1
    init_noise_var: float = 0.01
    init_chol_scale: float = 0.1

    def __post_init__(self):
        if self.variational not in ("full", "diag"):
            raise ValueError("variational must be 'full' or 'diag'")
        if self.mc_samples < 1 or self.steps < 0 or self.restart_period < 1:
            raise ValueError("invalid optimizer budget")


@dataclass
class GpHyperparams:
    lengthscales: np.ndarray  # (n_r, n_z)
    mixing: np.ndarray  # (n_r, n_theta); row r is a_r
    kappa: np.ndarray  # (n_r,)
    noise_var: float = 0.01

    @property
    def n_r(self) -> int:
        return self.mixing.shape[0]

    @property
    def n_theta(self) -> int:
        return self.mixing.shape[1]

    def coregionalization(self) -> np.ndarray:
        """B_r stacked, shape (n_r, n_theta, n_theta)."""
        a = self.mixing
        return a[:, :, None] * a[:, None, :] + self.kappa[:, None, None] * np.eye(self.n_theta)


@dataclass
class VariationalPosterior:
    mean: np.ndarray  # (D,)
    chol: np.ndarray  # (D, D) lower triangular, positive diagonal

    @property
    def cov(self) -> np.ndarray:
        return self.chol @ self.chol.T


@dataclass
class TrainingSet:
    ids: np.ndarray  # design ids (N,)
    Z: np.ndarray  # standardized features (N, n_z)
    Y: np.ndarray  # standardized observations (N, n_y)


@dataclass
class PredictiveLatent:
    mean: np.ndarray  # (N*, n_theta)
    cov: np.ndarray  # (N*, n_theta, n_theta) when marginal, else (N* n_theta, N* n_theta)
    marginal: bool = True

    def blocks(self) -> np.ndarray:
        if self.marginal:
            return self.cov
        n, k = self.mean.shape
        idx = np.arange(n)
        return self.cov.reshape(n, k, n, k)[idx, :, idx, :]

    def subset(self, rows: Sequence[int]) -> "PredictiveLatent":
        rows = np.asarray(rows)
        return PredictiveLatent(self.mean[rows], self.blocks()[rows], True)


# ---------------------------------------------------------------- kernels (numpy)

def ard_se_kernel(z, z_prime, lengthscales) -> float:
    d = (np.asarray(z, float) - np.asarray(z_prime, float)) / np.asarray(lengthscales, float)
    return float(np.exp(-0.5 * np.dot(d, d)))


def _se_gram(Za: np.ndarray, Zb: np.ndarray, lengthscales: np.ndarray) -> np.ndarray:
    """(n_r, Na, Nb) ARD-SE Gram matrices."""
    out = np.empty((lengthscales.shape[0], len(Za), len(Zb)))
    for r, ls in enumerate(lengthscales):
        a, b = Za / ls, Zb / ls
        d2 = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
        out[r] = np.exp(-0.5 * np.maximum(d2, 0.0))
    return out


def lmc_covariance(Za, Zb, hyper: GpHyperparams) -> np.ndarray:
    Za = np.atleast_2d(np.asarray(Za, float))
    Zb = np.atleast_2d(np.asarray(Zb, float))
    K = _se_gram(Za, Zb, hyper.lengthscales)
    B = hyper.coregionalization()
    k = hyper.n_theta
    return np.einsum("rij,rab->iajb", K, B).reshape(len(Za) * k, len(Zb) * k)


def cholesky_jitter(K: np.ndarray, start: float = 1e-8, max_jitter: float = 1e-4) -> tuple[np.ndarray, float]:
    """Cholesky of K + j * mean(diag K) * I, escalating j by x10 from `start` to `max_jitter`."""
    scale = float(np.mean(np.diag(K))) or 1.0
    j = start
    eye = np.eye(len(K))
    while j <= max_jitter * (1 + 1e-9):
        try:
            return np.linalg.cholesky(K + j * scale * eye), j * scale
        except np.linalg.LinAlgError:
            j *= 10.0
    raise CholeskyError(f"covariance not positive definite after jitter {max_jitter:g} x mean diagonal")


def gp_prior(Z, hyper: GpHyperparams, jitter_start: float = 1e-8, jitter_max: float = 1e-4):
    """Zero-mean prior over xi at Z: returns (mean, covariance incl. jitter, Cholesky factor)."""
    K = lmc_covariance(Z, Z, hyper)
    L, j = cholesky_jitter(K, jitter_start, jitter_max)
    return np.zeros(len(K)), K + j * np.eye(len(K)), L


def prior_marginal_variance(hyper: GpHyperparams) -> np.ndarray:
    return (hyper.mixing**2).sum(0) + hyper.kappa.sum()


# ---------------------------------------------------------------- likelihood / KL (numpy)

def log_likelihood(y_std, xi, noise_var: float, obs_matrix_std: np.ndarray, offset_std: np.ndarray) -> float:
    """Gaussian log-density of standardized observations for one design.

    obs_matrix_std (n_y, n_theta) and offset_std (n_y,) map theta to the
    standardized prediction: obs_matrix_std @ theta - offset_std.
    """
    pred = obs_matrix_std @ softplus(np.asarray(xi, float)) - offset_std
    r = np.asarray(y_std, float) - pred
    n = r.size
    return float(-0.5 * n * np.log(2 * np.pi * noise_var) - 0.5 * r @ r / noise_var)


def kl_gaussians(mu_q, L_q, mu_p, L_p) -> float:
    """KL(N(mu_q, L_q L_q^T) || N(mu_p, L_p L_p^T)) from Cholesky factors."""
    from scipy.linalg import solve_triangular

    mu_q, mu_p = np.atleast_1d(mu_q), np.atleast_1d(mu_p)
    L_q, L_p = np.atleast_2d(L_q), np.atleast_2d(L_p)
    if np.any(np.diag(L_q) <= 0) or np.any(np.diag(L_p) <= 0):
        raise SurrogateError("Cholesky factors must have positive diagonals")
    M = solve_triangular(L_p, L_q, lower=True)
    a = solve_triangular(L_p, mu_q - mu_p, lower=True)
    D = len(mu_q)
    return float(0.5 * ((M**2).sum() + a @ a - D + 2 * np.log(np.diag(L_p)).sum() - 2 * np.log(np.diag(L_q)).sum()))


# ---------------------------------------------------------------- torch objective

def _softplus_t(x):
    return torch.where(x > _SP_BRANCH, x + torch.exp(-torch.abs(x)), torch.log1p(torch.exp(torch.clamp(x, max=_SP_BRANCH))))


def _inv_softplus(x) -> np.ndarray:
    return softplus_inverse(np.asarray(x, float))


def _lmc_t(Za, Zb, log_ls, mixing, raw_kappa):
    ls = torch.exp(log_ls)
    a = Za[None, :, :] / ls[:, None, :]
    b = Zb[None, :, :] / ls[:, None, :]
    d2 = (a * a).sum(-1)[:, :, None] + (b * b).sum(-1)[:, None, :] - 2.0 * a @ b.transpose(1, 2)
    K = torch.exp(-0.5 * torch.clamp(d2, min=0.0))
    k = mixing.shape[1]
    B = mixing[:, :, None] * mixing[:, None, :] + _softplus_t(raw_kappa)[:, None, None] * torch.eye(k, dtype=K.dtype)
    return torch.einsum("rij,rab->iajb", K, B).reshape(Za.shape[0] * k, Zb.shape[0] * k)


def _chol_jitter_t(K, start: float, max_jitter: float):
    scale = K.diagonal().mean()
    eye = torch.eye(K.shape[0], dtype=K.dtype)
    j = start
    while j <= max_jitter * (1 + 1e-9):
        L, info = torch.linalg.cholesky_ex(K + j * scale * eye)
        if int(info) == 0:
            return L
        j *= 10.0
    raise CholeskyError(f"prior covariance not positive definite after jitter {max_jitter:g} x mean diagonal")


PARAM_NAMES = ("log_lengthscale", "mixing", "raw_kappa", "log_noise_var", "mu", "chol_offdiag", "chol_logdiag")


class ElboObjective:
    """Negative-free ELBO of a fixed training set as a function of unconstrained parameters."""

    def __init__(self, data: TrainingSet, obs_matrix_std: np.ndarray, offset_std: np.ndarray, config: SurrogateConfig):
        self.config = config
        self.Z = torch.as_tensor(data.Z, dtype=torch_dtype)
        self.Y = torch.as_tensor(data.Y, dtype=torch_dtype)
        A = torch.as_tensor(obs_matrix_std, dtype=torch_dtype)
        y = self.Y + torch.as_tensor(offset_std, dtype=torch_dtype)
        # ||y' - A theta||^2 = y'y' - 2 theta.(A^T y') + theta^T (A^T A) theta, y' = y + offset
        self.yy = (y * y).sum(1)
        self.Aty = y @ A
        self.AtA = A.T @ A
        self.N = data.Z.shape[0]
        self.D = self.N * config.n_theta

    def __call__(self, p: dict[str, torch.Tensor], eps: torch.Tensor) -> torch.Tensor:
        c = self.config
        Om = _lmc_t(self.Z, self.Z, p["log_lengthscale"], p["mixing"], p["raw_kappa"])
        LO = _chol_jitter_t(Om, c.jitter_start, c.jitter_max)
        L = _chol_factor_t(p, c.variational)
        mu = p["mu"]
        xi = mu + eps @ L.T
        theta = _softplus_t(xi).reshape(eps.shape[0], self.N, c.n_theta)
        sq = self.yy - 2 * (theta * self.Aty).sum(-1) + ((theta @ self.AtA) * theta).sum(-1)
        s2 = torch.exp(p["log_noise_var"])
        n_obs = self.Y.numel()
        ll = -0.5 * n_obs * torch.log(2 * math.pi * s2) - 0.5 * sq.sum(1) / s2
        M = torch.linalg.solve_triangular(LO, L, upper=False)
        a = torch.linalg.solve_triangular(LO, mu[:, None], upper=False)
        kl = 0.5 * ((M * M).sum() + (a * a).sum() - self.D
                    + 2 * torch.log(LO.diagonal()).sum() - 2 * torch.log(L.diagonal()).sum())
        return ll.mean() - kl

    def draw(self, n_samples: int, generator: torch.Generator) -> torch.Tensor:
        return torch.randn(n_samples, self.D, generator=generator, dtype=torch_dtype)


def _chol_factor_t(p, variational: str):
    diag = torch.diag(torch.exp(p["chol_logdiag"]))
    if variational == "diag":
        return diag
    return torch.tril(p["chol_offdiag"], -1) + diag


# ---------------------------------------------------------------- model

@dataclass
class SurrogateModel:
    config: SurrogateConfig
    params: dict[str, np.ndarray]  # unconstrained
    data: TrainingSet
    obs_matrix: np.ndarray  # (n_y, n_theta), raw stress units
    stats: NormalizationStats
    history: list[float] = field(default_factory=list)
    meta: dict = field(default_factory=dict)
    _cache: dict = field(default_factory=dict, repr=False)

    # -- constrained views
    @property
    def hyper(self) -> GpHyperparams:
        p = self.params
        return GpHyperparams(np.exp(p["log_lengthscale"]), p["mixing"].copy(), softplus(p["raw_kappa"]),
                             float(np.exp(p["log_noise_var"])))

    @property
    def posterior(self) -> VariationalPosterior:
        p = self.params
        L = np.diag(np.exp(p["chol_logdiag"]))
        if self.config.variational == "full":
            L = L + np.tril(p["chol_offdiag"], -1)
        return VariationalPosterior(p["mu"].copy(), L)

    @property
    def N(self) -> int:
        return len(self.data.ids)

    @property
    def obs_matrix_std(self) -> np.ndarray:
        return self.obs_matrix / self.stats.sigma_y.reshape(-1)[:, None]

    @property
    def offset_std(self) -> np.ndarray:
        return (self.stats.mu_y / self.stats.sigma_y).reshape(-1)

    def objective(self) -> ElboObjective:
        return ElboObjective(self.data, self.obs_matrix_std, self.offset_std, self.config)

    def prior_chol(self) -> np.ndarray:
        if "LO" not in self._cache:
            K = lmc_covariance(self.data.Z, self.data.Z, self.hyper)
            self._cache["LO"], self._cache["jitter"] = cholesky_jitter(K, self.config.jitter_start, self.config.jitter_max)
        return self._cache["LO"]

    def with_params(self, params: dict[str, np.ndarray]) -> "SurrogateModel":
        return SurrogateModel(self.config, {k: v.copy() for k, v in params.items()}, self.data, self.obs_matrix,
                              self.stats, list(self.history), dict(self.meta))


def init_params(N: int, n_z: int, config: SurrogateConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    D = N * config.n_theta
    return {
        "log_lengthscale": np.full((config.n_r, n_z), np.log(config.init_lengthscale)),
        "mixing": rng.normal(0.0, config.init_mixing_std, (config.n_r, config.n_theta)),
        "raw_kappa": np.full(config.n_r, _inv_softplus(config.init_kappa)),
        "log_noise_var": np.array(np.log(config.init_noise_var)),
        "mu": np.zeros(D),
        "chol_offdiag": np.zeros((D, D)),
        "chol_logdiag": np.full(D, np.log(config.init_chol_scale)),
    }


def _to_torch(params: dict[str, np.ndarray], grad: bool = True) -> dict[str, torch.Tensor]:
    return {k: torch.tensor(np.asarray(v), dtype=torch_dtype, requires_grad=grad) for k, v in params.items()}


def _to_numpy(params: dict[str, torch.Tensor]) -> dict[str, np.ndarray]:
    return {k: v.detach().numpy().copy() for k, v in params.items()}


def elbo(model: SurrogateModel, n_samples: int | None = None, seed: int = 0) -> float:
    obj = model.objective()
    gen = torch.Generator().manual_seed(int(seed))
    eps = obj.draw(n_samples or model.config.mc_samples, gen)
    with torch.no_grad():
        return float(obj(_to_torch(model.params, grad=False), eps))


def elbo_and_grad(model: SurrogateModel, eps: np.ndarray) -> tuple[float, dict[str, np.ndarray]]:
    obj = model.objective()
    p = _to_torch(model.params)
    val = obj(p, torch.as_tensor(eps, dtype=torch_dtype))
    val.backward()
    return float(val.detach()), {k: v.grad.numpy().copy() for k, v in p.items()}


def build_training_set(ids, Z, Y_raw, stats: NormalizationStats) -> TrainingSet:
    """Y_raw (N, n_f, n_obs) raw stresses -> standardized, flattened TrainingSet."""
    Y_std = (np.asarray(Y_raw, float) - stats.mu_y) / stats.sigma_y
    return TrainingSet(np.asarray(ids, int), np.asarray(Z, float), Y_std.reshape(len(Y_std), -1))


def train(
    data: TrainingSet,
    obs_matrix: np.ndarray,
    stats: NormalizationStats,
    config: SurrogateConfig | None = None,
    init: dict[str, np.ndarray] | None = None,
    seed: int | None = None,
    steps: int | None = None,
) -> SurrogateModel:
    """Maximize the MC-ELBO with Adam and cosine annealing with warm restarts.

    Returns the parameters with the best exponential running-average ELBO,
    unless they score below the starting point on a fixed evaluation draw.
    """
    config = config or SurrogateConfig()
    seed = config.seed if seed is None else seed
    steps = config.steps if steps is None else steps
    if len(data.ids) < 1:
        raise TrainingError("training set is empty")
    rng = np.random.default_rng(seed)
    start = init if init is not None else init_params(len(data.ids), data.Z.shape[1], config, rng)
    model = SurrogateModel(config, {k: np.array(v, dtype=float) for k, v in start.items()}, data, obs_matrix, stats)
    obj = model.objective()
    p = _to_torch(model.params)
    trainable = [v for k, v in p.items() if not (config.variational == "diag" and k == "chol_offdiag")]
    opt = torch.optim.Adam(trainable, lr=config.lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingWarmRestarts(
        opt, T_0=config.restart_period, eta_min=config.lr * config.lr_min_factor
    )
    gen = torch.Generator().manual_seed(int(seed))
    best, best_ema, ema = None, -math.inf, None
    trace = []
    for step in range(steps):
        opt.zero_grad()
        try:
            val = obj(p, obj.draw(config.mc_samples, gen))
        except CholeskyError as exc:
            raise TrainingError(f"step {step}: {exc}") from exc
        v = float(val.detach())
        if not math.isfinite(v):
            raise TrainingError(
                f"ELBO diverged at step {step} (value {v}); noise_var={math.exp(float(p['log_noise_var'].detach())):.3g}"
            )
        trace.append(v)
        ema = v if ema is None else config.ema * ema + (1 - config.ema) * v
        if ema > best_ema:
            best_ema, best = ema, _to_numpy(p)
        (-val).backward()
        opt.step()
        sched.step()
    candidate = model.with_params(best) if best is not None else model
    eval_seed = seed + 7919
    if best is not None and elbo(candidate, seed=eval_seed) < elbo(model, seed=eval_seed):
        candidate = model
    candidate.history = trace
    candidate.meta = {"seed": int(seed)}
    return candidate


# ---------------------------------------------------------------- prediction

def predict_latent(model: SurrogateModel, Z_star, marginal: bool = True, chunk: int = 2048) -> PredictiveLatent:
    """Closed-form q(xi*) = N(Om*^T Om^-1 mu, Om** + Om*^T Om^-1 (Sigma - Om) Om^-1 Om*)."""
    from scipy.linalg import cho_solve, solve_triangular

    Z_star = np.atleast_2d(np.asarray(Z_star, float))
    hyper = model.hyper
    k = hyper.n_theta
    LO = model.prior_chol()
    post = model.posterior
    Lq = post.chol
    B = hyper.coregionalization()
    means, covs = [], []
    if not marginal:
        Ks = lmc_covariance(model.data.Z, Z_star, hyper)
        W = cho_solve((LO, True), Ks)
        Kss = lmc_covariance(Z_star, Z_star, hyper)
        Sigma = Lq @ Lq.T
        Om = LO @ LO.T
        cov = Kss + W.T @ (Sigma - Om) @ W
        return PredictiveLatent((W.T @ post.mean).reshape(-1, k), 0.5 * (cov + cov.T), marginal=False)
    prior_block = B.sum(0)  # k(z, z) = 1 for every latent process
    for s in range(0, len(Z_star), chunk):
        Zc = Z_star[s:s + chunk]
        Ks = lmc_covariance(model.data.Z, Zc, hyper)
        V = solve_triangular(LO, Ks, lower=True)  # LO^-1 Om*
        W = solve_triangular(LO.T, V, lower=False)  # Om^-1 Om*
        U = Lq.T @ W
        n = len(Zc)
        V3 = V.reshape(-1, n, k)
        U3 = U.reshape(-1, n, k)
        blocks = prior_block[None] - np.einsum("dia,dib->iab", V3, V3) + np.einsum("dia,dib->iab", U3, U3)
        means.append((W.T @ post.mean).reshape(n, k))
        covs.append(0.5 * (blocks + blocks.transpose(0, 2, 1)))
    return PredictiveLatent(np.concatenate(means), np.concatenate(covs), marginal=True)


def block_sqrt(blocks: np.ndarray) -> np.ndarray:
    """Symmetric PSD square-root factors R with R R^T = block (negative eigenvalues clipped)."""
    w, V = np.linalg.eigh(blocks)
    return V * np.sqrt(np.clip(w, 0.0, None))[..., None, :]


def sample_latent(latent: PredictiveLatent, n_samples: int, rng: np.random.Generator) -> np.ndarray:
    """Draws (S, N*, n_theta) from the per-design marginals."""
    R = block_sqrt(latent.blocks())
    eta = rng.standard_normal((n_samples,) + latent.mean.shape)
    return latent.mean[None] + np.einsum("iab,sib->sia", R, eta)


def pushforward_stress(
    latent: PredictiveLatent, obs_matrix: np.ndarray, n_samples: int = 64, rng: np.random.Generator | None = None,
    offset: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """MC predictive mean and unbiased variance of obs_matrix @ softplus(xi) - offset, each (N*, n_y).

    The stress map is linear in theta, so the per-component sample variance
    equals diag(A C A^T) with C the unbiased sample covariance of the theta
    draws; that identity is used to avoid materializing (S, N*, n_y).
    """
    if n_samples < 2:
        raise ValueError("pushforward needs at least 2 samples")
    rng = rng or np.random.default_rng(0)
    theta = softplus(sample_latent(latent, n_samples, rng))  # (S, N, k)
    m = theta.mean(0)
    d = theta - theta[0]  # shifted so identical draws give exactly zero
    md = d.mean(0)
    C = (np.einsum("sia,sib->iab", d, d) - n_samples * md[:, :, None] * md[:, None, :]) / (n_samples - 1)
    A = np.asarray(obs_matrix)
    mean = m @ A.T
    if offset is not None:
        mean = mean - offset
    var = np.einsum("ya,iab,yb->iy", A, C, A)
    return mean, np.maximum(var, 0.0)


def point_estimate_params(latent_mean: np.ndarray) -> np.ndarray:
    """softplus of the predictive mean (not the mean of softplus)."""
    return softplus(latent_mean)


# ---------------------------------------------------------------- warm start

def expand_params(model: SurrogateModel, Z_new: np.ndarray) -> dict[str, np.ndarray]:
    """Unconstrained parameters for training set + Z_new: q extended by the prior conditional.

    The joint q(xi_old) p(xi_new | xi_old) has mean (mu, A mu) and Cholesky
    factor [[L, 0], [A L, chol(C)]] with A = Om_*^T Om^-1 and C the conditional
    prior covariance.
    """
    from scipy.linalg import cho_solve

    Z_new = np.atleast_2d(Z_new)
    hyper = model.hyper
    LO = model.prior_chol()
    post = model.posterior
    Ks = lmc_covariance(model.data.Z, Z_new, hyper)
    Kss = lmc_covariance(Z_new, Z_new, hyper)
    W = cho_solve((LO, True), Ks)
    A = W.T
    C = Kss - Ks.T @ W
    Lc, _ = cholesky_jitter(0.5 * (C + C.T), 1e-8, 1e-2)
    D_old, D_new = len(post.mean), len(Kss)
    L = np.zeros((D_old + D_new, D_old + D_new))
    L[:D_old, :D_old] = post.chol
    L[D_old:, :D_old] = A @ post.chol
    L[D_old:, D_old:] = Lc
    diag = np.clip(np.diag(L), 1e-6, None)
    params = {k: v.copy() for k, v in model.params.items() if k not in ("mu", "chol_offdiag", "chol_logdiag")}
    params["mu"] = np.concatenate([post.mean, A @ post.mean])
    params["chol_offdiag"] = np.tril(L, -1)
    params["chol_logdiag"] = np.log(diag)
    return params


# ---------------------------------------------------------------- persistence

def save_model(path, model: SurrogateModel, meta: dict | None = None) -> None:
    arrays = {f"param.{k}": np.asarray(v) for k, v in model.params.items()}
    arrays.update({
        "ids": model.data.ids.astype(np.int64), "Z": model.data.Z, "Y": model.data.Y,
        "obs_matrix": model.obs_matrix, "mu_z": model.stats.mu_z, "sigma_z": model.stats.sigma_z,
        "mu_y": model.stats.mu_y, "sigma_y": model.stats.sigma_y,
    })
    info = {"config": asdict(model.config), **model.meta, **(meta or {})}
    write_blob(path, MODEL_MAGIC, MODEL_VERSION, info, arrays)


def load_model(path) -> SurrogateModel:
    meta, a = read_blob(path, MODEL_MAGIC, MODEL_VERSION)
    config = SurrogateConfig(**meta["config"])
    params = {k[len("param."):]: v for k, v in a.items() if k.startswith("param.")}
    stats = NormalizationStats(a["mu_z"], a["sigma_z"], a["mu_y"], a["sigma_y"])
    data = TrainingSet(a["ids"].astype(int), a["Z"], a["Y"])
    extra = {k: v for k, v in meta.items() if k != "config"}
    return SurrogateModel(config, params, data, a["obs_matrix"], stats, meta=extra)
