"""Selection campaigns: many targets, every active-component combination, shared surrogate.

Targets are oracle responses of pool designs the surrogate never saw, under a
rotated loading schedule.  Each (target, combination) pair is an independent
selection run with its own evaluation counter and its own random stream, so
results do not depend on execution order or the number of worker threads.
"""
from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .designs import DesignPool
from .mechanics import COMPONENTS, Schedule, build_schedule, normalize_active
from .oracle import Oracle
from .selection import (
    ALL_COMBINATIONS, SelectionResult, TargetSpec, combination_label, hit_rate, parity_pairs, r2_score, run_selection,
)
from .surrogate import PredictiveLatent, SurrogateModel, predict_latent


@dataclass
class CampaignConfig:
    n_targets: int = 100
    combinations: Sequence[Sequence[str]] | None = None
    eta: float = 0.05
    e_max: int = 50
    weights: Sequence[float] = (1.0, 1.0, 1.0)
    checkpoints: Sequence[int] = (1, 5, 10, 20, 50)
    beta_deg: float = 45.0
    paths: Sequence[str] | None = None
    n_increments: int = 20
    shortlist_size: int | None = None
    exclude_training: bool = False
    mc_samples: int = 64
    seed: int = 0
    jobs: int = 1

    @property
    def combos(self) -> list[tuple[str, ...]]:
        if self.combinations is None:
            return list(ALL_COMBINATIONS)
        return [normalize_active(c) for c in self.combinations]

    def target_schedule(self) -> Schedule:
        kw = {} if self.paths is None else {"paths": tuple(self.paths)}
        return build_schedule(n_increments=self.n_increments, beta_deg=self.beta_deg, include_identity=True, **kw)


@dataclass
class CampaignRun:
    target_index: int
    combination: tuple[str, ...]
    target: TargetSpec
    result: SelectionResult


@dataclass
class Campaign:
    runs: list[CampaignRun]
    config: CampaignConfig
    target_calls: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def selection_calls(self) -> int:
        return sum(r.result.n_evals for r in self.runs)

    def by_combination(self) -> dict[str, list[CampaignRun]]:
        out: dict[str, list[CampaignRun]] = {}
        for c in self.config.combos:
            out[combination_label(c)] = [r for r in self.runs if r.combination == c]
        return out


def draw_target_ids(ids: Sequence[int], seen: Sequence[int], n_targets: int, seed: int) -> list[int]:
    unseen = np.setdiff1d(np.asarray(ids, int), np.asarray(seen, int))
    if n_targets > len(unseen):
        raise ValueError(f"requested {n_targets} targets but only {len(unseen)} unseen designs exist")
    rng = np.random.default_rng([seed, 0x7A6])
    return [int(i) for i in rng.choice(unseen, n_targets, replace=False)]


def run_campaign(
    model: SurrogateModel,
    pool: DesignPool,
    Z: np.ndarray,
    oracle: Oracle,
    config: CampaignConfig | None = None,
    latent: PredictiveLatent | None = None,
    progress: Callable[[int, int], None] | None = None,
) -> Campaign:
    config = config or CampaignConfig()
    schedule = config.target_schedule()
    ids = np.asarray(pool.ids, int)
    seen = [int(i) for i in model.data.ids]
    latent = latent if latent is not None else predict_latent(model, Z)
    sources = draw_target_ids(ids, seen, config.n_targets, config.seed)
    calls0 = oracle.count
    responses = [oracle.evaluate(pool[i], schedule) for i in sources]
    target_calls = oracle.count - calls0
    w_all = np.asarray(config.weights, float)
    exclude = seen if config.exclude_training else ()

    tasks = []
    for k, (src, P) in enumerate(zip(sources, responses)):
        for ci, combo in enumerate(config.combos):
            w = w_all[[COMPONENTS.index(c) for c in combo]]
            tgt = TargetSpec.from_stress(P, schedule, combo, weights=w, eta=config.eta, e_max=config.e_max,
                                         source_id=src)
            tasks.append((k, ci, combo, tgt))

    def work(task):
        k, ci, combo, tgt = task
        rng = np.random.default_rng([config.seed, 0x5E1, k, ci])
        res = run_selection(latent, ids, oracle, tgt, config.mc_samples, rng, exclude=exclude,
                            shortlist_size=config.shortlist_size, design_lookup=pool.__getitem__)
        return CampaignRun(k, combo, tgt, res)

    runs: list[CampaignRun] = []
    if config.jobs > 1:
        with ThreadPoolExecutor(config.jobs) as ex:
            for n, run in enumerate(ex.map(work, tasks), 1):
                runs.append(run)
                if progress:
                    progress(n, len(tasks))
    else:
        for n, task in enumerate(tasks, 1):
            runs.append(work(task))
            if progress:
                progress(n, len(tasks))
    return Campaign(runs, config, target_calls)


# ---------------------------------------------------------------- tables

def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    return "" if math.isnan(v) else f"{v:.10g}"


def summary_rows(campaign: Campaign) -> list[dict]:
    rows = []
    for run in campaign.runs:
        res, tgt = run.result, run.target
        row = {
            "target": run.target_index, "source_id": tgt.source_id, "combination": combination_label(run.combination),
            "final_id": res.final_id, "met": res.met_threshold, "n_evals": res.n_evals, "e_eta": res.e_eta,
            "nmae": res.final_nmae, "lambda": res.lam,
        }
        final = next((r for r in res.log if r.design_id == res.final_id), None)
        for c in COMPONENTS:
            j = tgt.active.index(c) if c in tgt.active else None
            row[f"nmae_P{c}"] = final.nmae_components[j] if (final and j is not None) else None
            row[f"target_P{c}"] = float(np.abs(tgt.stresses[:, j]).mean()) if j is not None else None
            ok = j is not None and res.achieved is not None
            row[f"achieved_P{c}"] = float(np.abs(res.achieved[:, j]).mean()) if ok else None
        row["failure"] = res.failure or ""
        rows.append(row)
    return rows


def hit_rate_rows(campaign: Campaign) -> list[dict]:
    rows = []
    for label, runs in campaign.by_combination().items():
        results = [r.result for r in runs]
        row = {"combination": label, "n_targets": len(runs)}
        for e in campaign.config.checkpoints:
            row[f"R_le_{int(e)}"] = hit_rate(results, int(e))
        for c in COMPONENTS:
            targets = [r.target for r in runs]
            t, a = parity_pairs(results, targets, c)
            try:
                row[f"R2_P{c}"] = r2_score(t, a) if len(t) else None
            except ValueError:
                row[f"R2_P{c}"] = None
        row["oracle_calls"] = sum(r.n_evals for r in results)
        row["max_evals"] = max((r.n_evals for r in results), default=0)
        rows.append(row)
    return rows


def e_eta_histogram(campaign: Campaign) -> list[dict]:
    rows = []
    for label, runs in campaign.by_combination().items():
        counts = np.zeros(int(campaign.config.e_max) + 1, int)
        for r in runs:
            if r.result.e_eta is not None:
                counts[r.result.e_eta] += 1
        rows += [{"combination": label, "e": e, "count": int(counts[e])} for e in range(1, len(counts))]
    return rows


def nmae_histogram(campaign: Campaign, n_bins: int = 10) -> list[dict]:
    """Budget-limited runs only: bins of width eta above the threshold, last bin open-ended."""
    eta = campaign.config.eta
    edges = [eta * (1 + k) for k in range(n_bins)] + [math.inf]
    rows = []
    for label, runs in campaign.by_combination().items():
        vals = [r.result.final_nmae for r in runs if not r.result.met_threshold and r.result.final_id is not None]
        for lo, hi in zip(edges[:-1], edges[1:]):
            rows.append({"combination": label, "lo": lo, "hi": hi, "count": sum(1 for v in vals if lo < v <= hi)})
    return rows


def parity_rows(campaign: Campaign) -> list[dict]:
    rows = []
    for run in campaign.runs:
        if run.result.achieved is None:
            continue
        for j, c in enumerate(run.target.active):
            rows.append({
                "combination": combination_label(run.combination), "target": run.target_index, "component": f"P{c}",
                "target_mean_abs": float(np.abs(run.target.stresses[:, j]).mean()),
                "achieved_mean_abs": float(np.abs(run.result.achieved[:, j]).mean()),
                "met": run.result.met_threshold,
            })
    return rows


def budget_rows(campaign: Campaign) -> list[dict]:
    return [
        {"quantity": "target_generation_calls", "value": campaign.target_calls},
        {"quantity": "selection_calls", "value": campaign.selection_calls},
        {"quantity": "selection_runs", "value": len(campaign.runs)},
        {"quantity": "max_calls_per_run", "value": max((r.result.n_evals for r in campaign.runs), default=0)},
        {"quantity": "e_max", "value": int(campaign.config.e_max)},
        {"quantity": "runs_over_budget",
         "value": sum(1 for r in campaign.runs if r.result.n_evals > r.target.e_max)},
    ]


def write_table(path, rows: list[dict], comment: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        if not rows:
            return
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(rows[0]))
        for r in rows:
            w.writerow([_fmt(v) if not isinstance(v, str) else v for v in r.values()])


def read_table(path) -> tuple[list[dict], str | None]:
    comment = None
    with open(path, newline="") as fh:
        lines = []
        for line in fh:
            if line.startswith("#"):
                comment = comment or line[1:].strip()
            else:
                lines.append(line)
    return list(csv.DictReader(lines)), comment


TABLES = {
    "summary.csv": summary_rows,
    "hit_rates.csv": hit_rate_rows,
    "e_eta_histogram.csv": e_eta_histogram,
    "nmae_histogram.csv": nmae_histogram,
    "parity.csv": parity_rows,
    "oracle_budget.csv": budget_rows,
}


def write_campaign(campaign: Campaign, out_dir, stamp: str | None = None, result_files: bool = True) -> list[Path]:
    from .selection import write_result_json

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, fn in TABLES.items():
        write_table(out / name, fn(campaign), stamp)
        written.append(out / name)
    if result_files:
        rdir = out / "results"
        rdir.mkdir(exist_ok=True)
        for run in campaign.runs:
            p = rdir / f"target{run.target_index:04d}_{combination_label(run.combination).replace('+', '_')}.json"
            write_result_json(p, run.result, run.target, {"stamp": stamp})
            written.append(p)
    return written
