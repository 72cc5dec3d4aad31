"""Surrogate-guided design selection with budgeted oracle verification.

The whole pool is screened with the point estimate softplus(mu*), the E_max
best candidates form the shortlist, and each is scored by
phi = E[L] + lambda * std[L] over latent draws.  Shortlisted designs are then
verified with the oracle in ascending phi order until the aggregated nMAE
meets the threshold or the budget runs out.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from itertools import combinations
from typing import Callable, Sequence

import numpy as np

from .mechanics import COMPONENTS, Schedule, normalize_active, softplus, stress_components, target_matrix
from .oracle import Oracle, OracleError
from .surrogate import PredictiveLatent, sample_latent

ALL_COMBINATIONS: tuple[tuple[str, ...], ...] = tuple(
    c for k in (1, 2, 3) for c in combinations(COMPONENTS, k)
)


class SelectionError(ValueError):
    pass


class DegenerateTargetError(SelectionError):
    pass


def combination_label(active: Sequence[str]) -> str:
    return "+".join(f"P{c}" for c in normalize_active(active))


@dataclass
class TargetSpec:
    stresses: np.ndarray  # (n_f, n_tar) active components per state, order 11, 22, 12
    schedule: Schedule
    active: tuple[str, ...]
    weights: np.ndarray | None = None
    eta: float = 0.05
    e_max: int = 50
    source_id: int | None = None

    def __post_init__(self):
        self.active = normalize_active(self.active)
        self.stresses = np.asarray(self.stresses, float).reshape(len(self.schedule), len(self.active))
        self.weights = np.ones(len(self.active)) if self.weights is None else np.asarray(self.weights, float)
        if self.weights.shape != (len(self.active),) or np.any(self.weights < 0) or self.weights.sum() <= 0:
            raise SelectionError("weights must be non-negative, one per active component, with a positive sum")
        if not self.eta > 0:
            raise SelectionError("eta must be positive")
        if int(self.e_max) < 1:
            raise SelectionError("e_max must be >= 1")

    @classmethod
    def from_stress(cls, P: np.ndarray, schedule: Schedule, active, **kw) -> "TargetSpec":
        """Build from full stresses (n_f, 3, 3)."""
        comps = stress_components(P)
        idx = [COMPONENTS.index(c) for c in normalize_active(active)]
        return cls(comps[:, idx], schedule, active, **kw)

    @property
    def matrix(self) -> np.ndarray:
        """Linear map theta -> target components, (n_f, n_tar, 3); cached."""
        key = "_matrix"
        if getattr(self, key, None) is None:
            object.__setattr__(self, key, target_matrix(self.schedule, self.active))
        return getattr(self, key)

    def to_json(self) -> dict:
        return {
            "active_components": list(self.active), "eta": self.eta, "e_max": int(self.e_max),
            "weights": [float(w) for w in self.weights], "source_id": self.source_id,
            "schedule": [{"path": s.path, "h": s.h, "F": [float(v) for v in s.F.ravel()]} for s in self.schedule],
            "stresses": [[float(v) for v in row] for row in self.stresses],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "TargetSpec":
        from .mechanics import DeformationState

        try:
            states = [DeformationState(np.array(s["F"], float).reshape(3, 3), s.get("path", ""), int(s.get("h", k)))
                      for k, s in enumerate(doc["schedule"])]
            return cls(np.array(doc["stresses"], float), Schedule(states), tuple(doc["active_components"]),
                       np.array(doc["weights"], float) if doc.get("weights") is not None else None,
                       float(doc.get("eta", 0.05)), int(doc.get("e_max", 50)), doc.get("source_id"))
        except (KeyError, TypeError) as exc:
            raise SelectionError(f"malformed target document: {exc}") from exc


@dataclass
class EvaluationRecord:
    e: int
    design_id: int
    phi: float
    nmae_components: list[float]
    nmae: float


@dataclass
class SelectionResult:
    final_id: int | None
    log: list[EvaluationRecord]
    met_threshold: bool
    shortlist: list[int]
    lam: float
    failure: str | None = None
    achieved: np.ndarray | None = field(default=None, repr=False)  # final design's components (n_f, n_tar)

    @property
    def n_evals(self) -> int:
        return len(self.log)

    @property
    def e_eta(self) -> int | None:
        """Evaluation index at which the threshold was met; None when budget-limited."""
        return self.log[-1].e if self.met_threshold else None

    @property
    def final_nmae(self) -> float:
        if self.final_id is None:
            return math.nan
        return min(r.nmae for r in self.log if r.design_id == self.final_id)

    def to_json(self) -> dict:
        return {
            "final_id": self.final_id, "met_threshold": self.met_threshold, "n_evals": self.n_evals,
            "e_eta": self.e_eta, "lambda": self.lam, "failure": self.failure, "shortlist": self.shortlist,
            "log": [asdict(r) for r in self.log],
        }


# ---------------------------------------------------------------- losses

def predicted_components(theta: np.ndarray, target: TargetSpec) -> np.ndarray:
    """theta (..., 3) -> predicted active components (..., n_f, n_tar)."""
    return np.einsum("fca,...a->...fc", target.matrix, np.asarray(theta, float))


def surrogate_mismatch(theta: np.ndarray, target: TargetSpec) -> np.ndarray | float:
    """Mean over states of the squared L2 distance between target and predicted components."""
    r = target.stresses - predicted_components(theta, target)
    out = (r * r).sum(-1).mean(-1)
    return float(out) if np.ndim(out) == 0 else out


def nmae(achieved: np.ndarray, target: TargetSpec) -> tuple[np.ndarray, float]:
    """Per-component normalized MAE and its weighted aggregate; achieved is (n_f, n_tar)."""
    achieved = np.asarray(achieved, float)
    denom = np.abs(target.stresses).mean(0)
    for c, d in zip(target.active, denom):
        if d <= 0:
            raise DegenerateTargetError(f"target component P{c} is identically zero; its nMAE is undefined")
    per = np.abs(achieved - target.stresses).mean(0) / denom
    agg = float((target.weights * per).sum() / target.weights.sum())
    return per, agg


# ---------------------------------------------------------------- shortlist and scoring

def _rank(values: np.ndarray, ids: np.ndarray) -> np.ndarray:
    """Row order by ascending value, ties by smaller id."""
    return np.lexsort((ids, values))


def screen_and_shortlist(theta_hat: np.ndarray, ids: Sequence[int], target: TargetSpec,
                         size: int | None = None, exclude: Sequence[int] = ()) -> tuple[np.ndarray, np.ndarray]:
    """Return (row indices, mismatches) of the `size` (default E_max) best designs."""
    ids = np.asarray(ids, int)
    size = int(target.e_max if size is None else size)
    L = np.asarray(surrogate_mismatch(theta_hat, target), float).reshape(-1)
    admissible = np.ones(len(ids), bool)
    if len(exclude):
        admissible &= ~np.isin(ids, np.asarray(exclude, int))
    if size > admissible.sum():
        raise SelectionError(f"shortlist size {size} exceeds the {int(admissible.sum())} admissible designs")
    rows = np.flatnonzero(admissible)
    order = rows[_rank(L[rows], ids[rows])][:size]
    return order, L[order]


def score_from_samples(loss_samples: np.ndarray) -> tuple[np.ndarray, float, np.ndarray, np.ndarray]:
    """(E, S) sampled losses -> (phi, lambda, means, stds); std is the unbiased sample std."""
    loss_samples = np.asarray(loss_samples, float)
    mean = loss_samples.mean(1)
    # shifted by the first draw so identical samples give exactly zero spread
    shifted = loss_samples - loss_samples[:, :1]
    std = shifted.std(1, ddof=1) if loss_samples.shape[1] > 1 else np.zeros(len(mean))
    sbar = std.mean()
    lam = float(mean.mean() / sbar) if sbar > 0 else 0.0
    return mean + lam * std, lam, mean, std


def uncertainty_score(latent: PredictiveLatent, target: TargetSpec, n_samples: int = 64,
                      rng: np.random.Generator | None = None):
    """phi per shortlisted design from MC draws of its latent marginal."""
    rng = rng or np.random.default_rng(0)
    theta = softplus(sample_latent(latent, n_samples, rng))  # (S, E, 3)
    losses = np.asarray(surrogate_mismatch(theta, target)).T  # (E, S)
    return score_from_samples(losses)


# ---------------------------------------------------------------- loop

def run_selection(
    latent: PredictiveLatent,
    ids: Sequence[int],
    evaluate: Callable[[int, Schedule], np.ndarray] | Oracle,
    target: TargetSpec,
    n_samples: int = 64,
    rng: np.random.Generator | None = None,
    exclude: Sequence[int] = (),
    shortlist_size: int | None = None,
    design_lookup: Callable[[int], object] | None = None,
) -> SelectionResult:
    """Screen, shortlist, score and verify within the budget target.e_max.

    `latent` holds the pool-wide predictive marginals, row-aligned with `ids`.
    `evaluate` is either a function (design_id, schedule) -> stresses (n_f, 3, 3)
    or an Oracle together with `design_lookup` mapping ids to designs.
    """
    ids = np.asarray(ids, int)
    if isinstance(evaluate, Oracle):
        if design_lookup is None:
            raise SelectionError("an Oracle needs design_lookup to resolve ids")
        oracle = evaluate
        evaluate = lambda i, sched: oracle.evaluate(design_lookup(i), sched)  # noqa: E731
    size = max(int(shortlist_size or target.e_max), 1)
    rows, _ = screen_and_shortlist(point_theta(latent), ids, target, size, exclude)
    phi, lam, _, _ = uncertainty_score(latent.subset(rows), target, n_samples, rng)
    order = _rank(phi, ids[rows])
    shortlist = [int(ids[rows[k]]) for k in order]
    log: list[EvaluationRecord] = []
    achieved: dict[int, np.ndarray] = {}
    met, failure = False, None
    for e, k in enumerate(order[: int(target.e_max)], start=1):
        did = int(ids[rows[k]])
        try:
            P = np.asarray(evaluate(did, target.schedule), float)
        except OracleError as exc:
            failure = f"oracle failed on design {did} at e={e}: {exc}"
            break
        comps = stress_components(P)[:, [COMPONENTS.index(c) for c in target.active]]
        per, agg = nmae(comps, target)
        achieved[did] = comps
        log.append(EvaluationRecord(e, did, float(phi[k]), [float(v) for v in per], agg))
        if agg <= target.eta:
            met = True
            break
    final = None
    if log:
        best = min(log, key=lambda r: (r.nmae, r.design_id))
        final = log[-1].design_id if met else best.design_id
    return SelectionResult(final, log, met, shortlist, lam, failure, achieved.get(final))


def point_theta(latent: PredictiveLatent) -> np.ndarray:
    return softplus(latent.mean)


# ---------------------------------------------------------------- metrics

def hit_rate(results: Sequence[SelectionResult], e_hit: int) -> float:
    if not results:
        return math.nan
    return sum(1 for r in results if r.e_eta is not None and r.e_eta <= e_hit) / len(results)


def r2_score(target_values: Sequence[float], achieved_values: Sequence[float]) -> float:
    t = np.asarray(target_values, float)
    a = np.asarray(achieved_values, float)
    if len(t) < 2:
        raise SelectionError("R^2 needs at least two targets")
    ss_tot = ((t - t.mean()) ** 2).sum()
    if ss_tot <= 0:
        raise SelectionError("target values have zero variance; R^2 undefined")
    return float(1.0 - ((a - t) ** 2).sum() / ss_tot)


def parity_pairs(results: Sequence[SelectionResult], targets: Sequence[TargetSpec], component: str):
    """(target, achieved) mean absolute stress of `component` per run, both result kinds included."""
    comp = normalize_active([component])[0]
    t_vals, a_vals = [], []
    for res, tgt in zip(results, targets):
        if res.achieved is None or comp not in tgt.active:
            continue
        j = tgt.active.index(comp)
        t_vals.append(float(np.abs(tgt.stresses[:, j]).mean()))
        a_vals.append(float(np.abs(res.achieved[:, j]).mean()))
    return np.array(t_vals), np.array(a_vals)


def parity_r2(results: Sequence[SelectionResult], targets: Sequence[TargetSpec], component: str) -> float:
    return r2_score(*parity_pairs(results, targets, component))


def write_result_json(path, result: SelectionResult, target: TargetSpec, meta: dict | None = None) -> None:
    doc = {"meta": meta or {}, "target": {"active_components": list(target.active), "eta": target.eta,
                                          "e_max": int(target.e_max), "source_id": target.source_id},
           "result": result.to_json()}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
