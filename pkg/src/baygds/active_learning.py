"""Uncertainty-driven acquisition loop.

Each iteration scores every unlabeled design by the log-volume of its
diagonal predictive stress covariance, labels the arg-max with one oracle
call, and retrains the surrogate from a warm start.  The loop stops when the
sliding-window relative change of the hold-out MAE drops below a threshold,
or at the iteration cap.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import surrogate as sg
from .designs import DesignPool
from .features import NormalizationStats
from .mechanics import Schedule, extract_obs, observation_matrix
from .oracle import Oracle, OracleError

VAR_FLOOR = 1e-12
STRATEGIES = ("lhs", "random", "kmedoids")


class ActiveLearningError(RuntimeError):
    pass


class PartitionError(ActiveLearningError, ValueError):
    pass


class AcquisitionAborted(ActiveLearningError):
    """Oracle failure mid-loop; carries the last good model and the history so far."""

    def __init__(self, message, model, history):
        super().__init__(message)
        self.model = model
        self.history = history


@dataclass
class PoolPartition:
    labeled: list[int]
    unlabeled: list[int]
    test: list[int]

    def check(self, n_d: int | None = None) -> None:
        a, b, c = set(self.labeled), set(self.unlabeled), set(self.test)
        if len(a) != len(self.labeled) or len(b) != len(self.unlabeled) or len(c) != len(self.test):
            raise PartitionError("duplicate ids within a partition set")
        if a & b or a & c or b & c:
            raise PartitionError("partition sets overlap")
        if n_d is not None and len(a) + len(b) + len(c) != n_d:
            raise PartitionError(f"partition covers {len(a) + len(b) + len(c)} of {n_d} designs")

    def move(self, design_id: int) -> None:
        self.unlabeled.remove(design_id)
        self.labeled.append(design_id)


@dataclass
class IterationRecord:
    t: int
    selected_id: int | None
    mae: float
    delta: float
    elbo: float
    score: float | None = None


@dataclass
class LearningHistory:
    records: list[IterationRecord] = field(default_factory=list)

    @property
    def maes(self) -> list[float]:
        return [r.mae for r in self.records]

    def __len__(self):
        return len(self.records)

    def write_csv(self, path, comment: str | None = None) -> None:
        with open(path, "w", newline="") as fh:
            if comment:
                fh.write(f"# {comment}\n")
            w = csv.writer(fh)
            w.writerow(["t", "selected_id", "mae", "delta", "elbo"])
            for r in self.records:
                w.writerow([r.t, "" if r.selected_id is None else r.selected_id, repr(r.mae),
                            "inf" if math.isinf(r.delta) else repr(r.delta), repr(r.elbo)])


@dataclass
class ALConfig:
    n_init: int = 10
    n_test: int = 500
    t_max: int = 230
    eps: float = 1e-3
    window: int = 5
    mc_samples: int = 64
    batch: int = 1
    strategy: str = "lhs"
    acquisition: str = "uncertainty"  # or "random" (baseline)
    score_cap: int | None = None
    retrain_steps: int | None = None  # None -> surrogate config steps
    seed: int = 0
    checkpoint_every: int = 0
    checkpoint_dir: str | None = None

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}")
        if self.acquisition not in ("uncertainty", "random"):
            raise ValueError("acquisition must be 'uncertainty' or 'random'")
        if self.n_init < 1 or self.n_test < 1 or self.window < 1 or self.batch < 1:
            raise ValueError("n_init, n_test, window and batch must be >= 1")
        if self.t_max < 0 or self.mc_samples < 2:
            raise ValueError("t_max must be >= 0 and mc_samples >= 2")


# ---------------------------------------------------------------- partition

def _lhs_pick(Z: np.ndarray, k: int, rng: np.random.Generator) -> list[int]:
    """k rows of Z nearest to a Latin-hypercube design laid over the per-dimension empirical quantiles."""
    n, d = Z.shape
    u = (rng.permuted(np.tile(np.arange(k), (d, 1)), axis=1).T + rng.random((k, d))) / k
    targets = np.stack([np.quantile(Z[:, j], u[:, j]) for j in range(d)], axis=1)
    chosen: list[int] = []
    taken = np.zeros(n, bool)
    for t in targets:
        d2 = ((Z - t) ** 2).sum(1)
        d2[taken] = np.inf
        i = int(np.argmin(d2))
        taken[i] = True
        chosen.append(i)
    return chosen


def _kmedoids_pick(Z: np.ndarray, k: int, rng: np.random.Generator, iters: int = 20) -> list[int]:
    n = len(Z)
    med = rng.choice(n, k, replace=False)
    for _ in range(iters):
        d2 = ((Z[:, None, :] - Z[None, med, :]) ** 2).sum(-1)
        assign = np.argmin(d2, axis=1)
        new = med.copy()
        for c in range(k):
            members = np.flatnonzero(assign == c)
            if len(members):
                inner = ((Z[members, None, :] - Z[None, members, :]) ** 2).sum(-1).sum(1)
                new[c] = members[np.argmin(inner)]
        if np.array_equal(np.sort(new), np.sort(med)):
            break
        med = new
    return [int(i) for i in med]


def init_partition(ids: Sequence[int], Z: np.ndarray, n_init: int, n_test: int, seed: int,
                   strategy: str = "lhs") -> PoolPartition:
    """T0 by the chosen space-filling strategy over all designs; the hold-out set is random among the rest."""
    ids = np.asarray(ids, int)
    Z = np.asarray(Z, float)
    if n_init < 1 or n_test < 1:
        raise PartitionError("|T0| and |H| must be >= 1")
    if n_init + n_test > len(ids):
        raise PartitionError(f"|T0| + |H| = {n_init + n_test} exceeds the pool size {len(ids)}")
    rng = np.random.default_rng([seed, 0xA1])
    if strategy == "lhs":
        rows = _lhs_pick(Z, n_init, rng)
    elif strategy == "kmedoids":
        rows = _kmedoids_pick(Z, n_init, rng)
    elif strategy == "random":
        rows = [int(i) for i in rng.choice(len(ids), n_init, replace=False)]
    else:
        raise PartitionError(f"unknown strategy {strategy!r}")
    rest = np.setdiff1d(np.arange(len(ids)), rows)
    test_rows = np.sort(rng.choice(rest, n_test, replace=False))
    unlab_rows = np.setdiff1d(rest, test_rows)
    part = PoolPartition([int(ids[r]) for r in rows], [int(ids[r]) for r in unlab_rows],
                         [int(ids[r]) for r in test_rows])
    part.check(len(ids))
    return part


# ---------------------------------------------------------------- scoring and stopping

def acquisition_from_variance(var: np.ndarray) -> np.ndarray:
    """sum_k log(var_k + floor) per row."""
    return np.log(np.asarray(var, float) + VAR_FLOOR).sum(-1)


def acquisition_score(model: sg.SurrogateModel, Z_cand: np.ndarray, n_samples: int = 64,
                      rng: np.random.Generator | None = None) -> np.ndarray:
    latent = sg.predict_latent(model, Z_cand)
    _, var = sg.pushforward_stress(latent, model.obs_matrix, n_samples, rng)
    return acquisition_from_variance(var)


def select_next(scores: Sequence[float], ids: Sequence[int]) -> int:
    """Arg-max score; ties go to the smallest id."""
    if len(ids) == 0:
        raise ActiveLearningError("no unlabeled candidates left")
    scores = np.asarray(scores, float)
    ids = np.asarray(ids, int)
    best = scores.max()
    return int(ids[scores == best].min())


def mae_from_predictions(Y_pred_std: np.ndarray, Y_obs_std: np.ndarray) -> float:
    diff = np.abs(np.asarray(Y_pred_std) - np.asarray(Y_obs_std))
    return float(diff.reshape(len(diff), -1).sum(1).mean())


def holdout_mae(model: sg.SurrogateModel, Z_test: np.ndarray, Y_test_std: np.ndarray, n_samples: int = 64,
                rng: np.random.Generator | None = None) -> float:
    """Mean over hold-out designs of the L1 error of the MC predictive mean, standardized space."""
    latent = sg.predict_latent(model, Z_test)
    mean, _ = sg.pushforward_stress(latent, model.obs_matrix_std, n_samples, rng, offset=model.offset_std)
    return mae_from_predictions(mean, np.asarray(Y_test_std).reshape(len(mean), -1))


def stopping_delta(maes: Sequence[float], window: int) -> float:
    """Mean relative MAE change over the last `window` steps; inf until window + 1 values exist."""
    if len(maes) < window + 1:
        return math.inf
    m = np.asarray(maes[-(window + 1):], float)
    prev, cur = m[:-1], m[1:]
    if np.any(prev == 0):
        return 0.0
    return float(np.mean(np.abs(cur - prev) / prev))


# ---------------------------------------------------------------- loop

def observe(oracle: Oracle, design, schedule: Schedule) -> np.ndarray:
    P = oracle.evaluate(design, schedule)
    return np.stack([extract_obs(p) for p in P])


@dataclass
class ALResult:
    model: sg.SurrogateModel
    history: LearningHistory
    partition: PoolPartition
    stats: NormalizationStats
    labels: dict[int, np.ndarray]  # id -> raw observations (n_f, 2), labeled set only
    oracle_calls: int = 0


def run_active_learning(
    pool: DesignPool,
    Z: np.ndarray,
    oracle: Oracle,
    schedule: Schedule,
    config: ALConfig | None = None,
    surrogate_config: sg.SurrogateConfig | None = None,
    feature_stats: NormalizationStats | None = None,
    progress: Callable[[IterationRecord], None] | None = None,
) -> ALResult:
    """Label T0 and H, train, then acquire one (or `batch`) design per iteration until converged or t_max."""
    config = config or ALConfig()
    sconf = surrogate_config or sg.SurrogateConfig()
    Z = np.asarray(Z, float)
    row_of = {int(i): r for r, i in enumerate(pool.ids)}
    part = init_partition(pool.ids, Z, config.n_init, config.n_test, config.seed, config.strategy)
    calls0 = oracle.count

    labels = {i: observe(oracle, pool[i], schedule) for i in part.labeled}
    Y_test = np.stack([observe(oracle, pool[i], schedule) for i in part.test])
    base = feature_stats or NormalizationStats(np.zeros(Z.shape[1]), np.ones(Z.shape[1]))
    stats = base.with_observations(np.stack([labels[i] for i in part.labeled]))
    Y_test_std = ((Y_test - stats.mu_y) / stats.sigma_y).reshape(len(Y_test), -1)
    Z_test = Z[[row_of[i] for i in part.test]]
    A = observation_matrix(schedule)

    def training_set():
        lab = part.labeled
        return sg.build_training_set(lab, Z[[row_of[i] for i in lab]], np.stack([labels[i] for i in lab]), stats)

    model = sg.train(training_set(), A, stats, sconf, seed=sconf.seed)
    history = LearningHistory()
    mae_rng = lambda t: np.random.default_rng([config.seed, 0x3AE, t])  # noqa: E731
    rec = IterationRecord(0, None, holdout_mae(model, Z_test, Y_test_std, config.mc_samples, mae_rng(0)), math.inf,
                          sg.elbo(model, seed=sconf.seed))
    history.records.append(rec)
    if progress:
        progress(rec)
    t, delta = 0, math.inf
    while t < config.t_max and delta >= config.eps and part.unlabeled:
        t += 1
        rng = np.random.default_rng([config.seed, 0xACC, t])
        cand = np.asarray(part.unlabeled, int)
        if config.score_cap and len(cand) > config.score_cap:
            cand = np.sort(rng.choice(cand, config.score_cap, replace=False))
        if config.acquisition == "random":
            scores = np.zeros(len(cand))
            order = rng.permutation(len(cand))
            picks = [int(cand[k]) for k in order[:config.batch]]
        else:
            scores = acquisition_score(model, Z[[row_of[i] for i in cand]], config.mc_samples, rng)
            picks, avail, s_left = [], cand.copy(), scores.copy()
            for _ in range(min(config.batch, len(cand))):
                pick = select_next(s_left, avail)
                picks.append(pick)
                keep = avail != pick
                avail, s_left = avail[keep], s_left[keep]
        n_before = oracle.count
        for pick in picks:
            try:
                labels[pick] = observe(oracle, pool[pick], schedule)
            except OracleError as exc:
                _checkpoint(model, config, t - 1, tag="abort")
                raise AcquisitionAborted(f"oracle failed on design {pick} at t={t}: {exc}", model, history) from exc
            part.move(pick)
        assert oracle.count - n_before == len(picks)
        new_rows = [row_of[i] for i in picks]
        init = sg.expand_params(model, Z[new_rows])
        model = sg.train(training_set(), A, stats, sconf, init=init, seed=sconf.seed + t, steps=config.retrain_steps)
        maes = history.maes + [holdout_mae(model, Z_test, Y_test_std, config.mc_samples, mae_rng(t))]
        delta = stopping_delta(maes, config.window)
        best_score = float(scores[list(cand).index(picks[0])]) if config.acquisition == "uncertainty" else None
        rec = IterationRecord(t, picks[0], maes[-1], delta,
                              sg.elbo(model, seed=sconf.seed), best_score)
        history.records.append(rec)
        if progress:
            progress(rec)
        if config.checkpoint_every and t % config.checkpoint_every == 0:
            _checkpoint(model, config, t)
    return ALResult(model, history, part, stats, labels, oracle.count - calls0)


def _checkpoint(model, config: ALConfig, t: int, tag: str = "iter") -> None:
    if not config.checkpoint_dir:
        return
    d = Path(config.checkpoint_dir)
    d.mkdir(parents=True, exist_ok=True)
    sg.save_model(d / f"{tag}_{t:04d}.bin", model, {"t": t})
