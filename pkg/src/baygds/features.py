"""Two-point statistics + PCA descriptors, and the standardization used by the surrogate."""
from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

from ._blob import read_blob, write_blob
from .designs import DesignPool, Microstructure

PCA_MAGIC = b"BGPC"
PCA_VERSION = 1
DEGENERATE_STD = 1e-12


class FeatureError(ValueError):
    pass


class DegenerateStatisticsError(FeatureError):
    pass


def two_point_autocorr(indicator: np.ndarray) -> np.ndarray:
    """Periodic autocorrelation f(r) = mean_x m(x) m(x + r), via FFT."""
    m = np.asarray(indicator, dtype=float)
    spec = np.fft.fft2(m)
    return np.real(np.fft.ifft2(spec * np.conj(spec))) / m.size


def interface_indicator(m: Microstructure | np.ndarray, stencil: int = 4) -> np.ndarray:
    """Solid pixels with at least one void neighbour (periodic wrap)."""
    g = m.grid if isinstance(m, Microstructure) else np.asarray(m)
    if stencil == 4:
        shifts = [(1, 0), (-1, 0), (0, 1), (0, -1)]
    elif stencil == 8:
        shifts = [(a, b) for a in (-1, 0, 1) for b in (-1, 0, 1) if (a, b) != (0, 0)]
    else:
        raise FeatureError("stencil must be 4 or 8")
    void_nb = np.zeros(g.shape, dtype=bool)
    for s in shifts:
        void_nb |= np.roll(g, s, axis=(0, 1)) == 0
    return ((g == 1) & void_nb).astype(np.uint8)


def correlation_vector(m: Microstructure, stencil: int = 4) -> np.ndarray:
    solid = two_point_autocorr(m.grid)
    iface = two_point_autocorr(interface_indicator(m, stencil))
    return np.concatenate([solid.ravel(), iface.ravel()])


@dataclass(frozen=True)
class PcaModel:
    mean: np.ndarray
    components: np.ndarray  # (n_z, dim), orthonormal rows
    explained_variance: np.ndarray
    n: int = 0  # grid side the model was fitted on; 0 when unknown

    @property
    def n_z(self) -> int:
        return self.components.shape[0]

    def transform(self, X: np.ndarray) -> np.ndarray:
        return (np.asarray(X) - self.mean) @ self.components.T

    def inverse_transform(self, Z: np.ndarray) -> np.ndarray:
        return np.asarray(Z) @ self.components + self.mean


def fit_pca(vectors: Sequence[np.ndarray] | np.ndarray, n_z: int, n: int = 0, rank_tol: float = 1e-10) -> PcaModel:
    X = np.asarray(vectors, dtype=float)
    if n_z < 1:
        raise FeatureError("n_z must be >= 1")
    if X.shape[0] < n_z + 1:
        raise FeatureError(f"need at least n_z + 1 = {n_z + 1} vectors, got {X.shape[0]}")
    mean = X.mean(axis=0)
    U, s, Vt = np.linalg.svd(X - mean, full_matrices=False)
    var = s**2 / (X.shape[0] - 1)
    rank = int(np.sum(s > rank_tol * max(s[0], 1e-300)))
    if n_z > rank:
        raise FeatureError(f"n_z = {n_z} exceeds the data rank; achievable rank is {rank}")
    comps = Vt[:n_z].copy()
    # deterministic sign: largest-magnitude loading positive
    flip = np.sign(comps[np.arange(n_z), np.argmax(np.abs(comps), axis=1)])
    comps *= flip[:, None]
    return PcaModel(mean, comps, var[:n_z].copy(), n)


@dataclass(frozen=True)
class NormalizationStats:
    mu_z: np.ndarray
    sigma_z: np.ndarray
    mu_y: np.ndarray | None = None  # (n_f, n_obs)
    sigma_y: np.ndarray | None = None

    def with_observations(self, Y: np.ndarray) -> "NormalizationStats":
        """Freeze per-state observation statistics from the initial labeled set, Y (N, n_f, n_obs)."""
        Y = np.asarray(Y, dtype=float)
        mu, sd = Y.mean(axis=0), Y.std(axis=0)
        bad = np.argwhere(sd <= DEGENERATE_STD)
        if len(bad):
            j, c = bad[0]
            raise DegenerateStatisticsError(
                f"observation std vanishes at state {j}, component {c}; drop stress-free states from the training schedule"
            )
        return replace(self, mu_y=mu, sigma_y=sd)


def fit_feature_stats(Z_raw: np.ndarray) -> NormalizationStats:
    Z_raw = np.asarray(Z_raw, dtype=float)
    mu, sd = Z_raw.mean(axis=0), Z_raw.std(axis=0)
    bad = np.flatnonzero(sd <= DEGENERATE_STD)
    if len(bad):
        raise DegenerateStatisticsError(f"feature component(s) {list(bad + 1)} have zero variance over the pool")
    return NormalizationStats(mu, sd)


def standardize_features(Z_raw: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    return (np.asarray(Z_raw) - stats.mu_z) / stats.sigma_z


def _check_obs_stats(stats: NormalizationStats) -> None:
    if stats.mu_y is None or stats.sigma_y is None:
        raise FeatureError("observation statistics have not been frozen")
    if np.any(stats.sigma_y <= DEGENERATE_STD):
        raise DegenerateStatisticsError("observation std below 1e-12")


def standardize_observations(y: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    """y (..., n_f, n_obs) -> componentwise (y - mu_y) / sigma_y."""
    _check_obs_stats(stats)
    return (np.asarray(y) - stats.mu_y) / stats.sigma_y


def destandardize_observations(y_std: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    _check_obs_stats(stats)
    return np.asarray(y_std) * stats.sigma_y + stats.mu_y


def featurize(m: Microstructure, pca: PcaModel, stats: NormalizationStats, stencil: int = 4) -> np.ndarray:
    if pca.n and m.n != pca.n:
        raise FeatureError(f"grid size {m.n} does not match the PCA model ({pca.n})")
    return standardize_features(pca.transform(correlation_vector(m, stencil)[None, :])[0], stats)


def correlation_matrix(designs: Iterable[Microstructure], stencil: int = 4) -> np.ndarray:
    return np.stack([correlation_vector(m, stencil) for m in designs])


def featurize_pool(pool: DesignPool, n_z: int = 6, stencil: int = 4) -> tuple[PcaModel, NormalizationStats, np.ndarray]:
    """Fit PCA and feature statistics over the whole pool; return standardized features (n_d, n_z)."""
    X = correlation_matrix(pool, stencil)
    pca = fit_pca(X, n_z, n=pool.n)
    Z_raw = pca.transform(X)
    stats = fit_feature_stats(Z_raw)
    return pca, stats, standardize_features(Z_raw, stats)


# ---------------------------------------------------------------- persistence

def save_pca(path, pca: PcaModel, stats: NormalizationStats, meta: dict | None = None) -> None:
    write_blob(
        path, PCA_MAGIC, PCA_VERSION, {"n": pca.n, "n_z": pca.n_z, **(meta or {})},
        {"mean": pca.mean, "components": pca.components, "explained_variance": pca.explained_variance,
         "mu_z": stats.mu_z, "sigma_z": stats.sigma_z},
    )


def load_pca(path) -> tuple[PcaModel, NormalizationStats, dict]:
    meta, a = read_blob(path, PCA_MAGIC, PCA_VERSION)
    pca = PcaModel(a["mean"], a["components"], a["explained_variance"], int(meta["n"]))
    return pca, NormalizationStats(a["mu_z"], a["sigma_z"]), meta


def write_features_csv(path, ids: Sequence[int], Z: np.ndarray, comment: str | None = None) -> None:
    Z = np.asarray(Z)
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh)
        w.writerow(["id"] + [f"z{k + 1}" for k in range(Z.shape[1])])
        for i, row in zip(ids, Z):
            w.writerow([int(i)] + [repr(float(v)) for v in row])


def read_features_csv(path) -> tuple[np.ndarray, np.ndarray, str | None]:
    """Return (ids, Z, comment line or None)."""
    comment = None
    rows = []
    with open(path, newline="") as fh:
        lines = []
        for line in fh:
            if line.startswith("#"):
                comment = comment or line[1:].strip()
            else:
                lines.append(line)
        reader = csv.reader(lines)
        header = next(reader)
        if not header or header[0] != "id":
            raise FeatureError(f"{path}: expected header 'id,z1..', got {header}")
        for row in reader:
            rows.append([float(v) for v in row])
    arr = np.array(rows)
    return arr[:, 0].astype(int), arr[:, 1:], comment
