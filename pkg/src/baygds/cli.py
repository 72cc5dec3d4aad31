"""`baygds` command-line workbench.

Stages and their artifacts:

    gen-pool   pool.bgds
    featurize  features.csv, pca.bin
    label      labels.csv                (oracle responses on the training schedule)
    train      model.bin
    al         model.bin, history.csv, labels.csv, partition.json
    target     target.json               (oracle response of one pool design)
    select     result.json
    campaign   summary.csv and friends, results/*.json
    report     summary.txt, figures
    run        all of the above in one directory

Exit codes: 0 success, 1 user error, 2 internal error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import __version__
from . import surrogate as sg
from ._blob import BlobFormatError
from .active_learning import ALConfig, PartitionError, observe, run_active_learning
from .campaign import CampaignConfig, TABLES, read_table, run_campaign, write_campaign
from .config import ConfigError, ExperimentConfig, load_config
from .designs import DesignError, DesignPool, generate_pool, load_pool, read_pool_header, save_pool
from .features import (
    FeatureError, NormalizationStats, featurize, featurize_pool, load_pca, read_features_csv, save_pca,
    write_features_csv,
)
from .mechanics import (
    COMPONENTS, MechanicsError, build_schedule, extract_obs, observation_matrix, normalize_active, read_stress_csv,
    write_stress_csv,
)
from .oracle import ExternalOracle, Oracle, OracleError, SyntheticOracle, SyntheticOracleConfig
from .selection import SelectionError, TargetSpec, run_selection, write_result_json

log = logging.getLogger("baygds")

EXIT_OK, EXIT_USER, EXIT_INTERNAL = 0, 1, 2
USER_ERRORS = (ConfigError, DesignError, FeatureError, BlobFormatError, SelectionError, PartitionError,
               MechanicsError, OracleError, FileNotFoundError, IsADirectoryError, PermissionError)


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------- helpers

def pool_token(cfg: ExperimentConfig) -> int:
    return int(cfg.stage_hash("pool")[:8], 16)


def read_comment(path) -> str | None:
    with open(path) as fh:
        first = fh.readline()
    return first[1:].strip() if first.startswith("#") else None


def open_pool(path, cfg: ExperimentConfig) -> DesignPool:
    _, _, reserved = read_pool_header(path)
    if reserved != pool_token(cfg):
        raise ConfigError(f"{path} was generated with a different pool configuration; rerun gen-pool")
    return load_pool(path)


def open_features(path, cfg: ExperimentConfig):
    ids, Z, comment = read_features_csv(path)
    cfg.check_stamp(comment, "features", str(path))
    return ids, Z


def open_pca(path, cfg: ExperimentConfig):
    pca, stats, meta = load_pca(path)
    cfg.check_stamp(meta.get("stamp"), "features", str(path))
    return pca, stats


def open_model(path, cfg: ExperimentConfig) -> sg.SurrogateModel:
    model = sg.load_model(path)
    cfg.check_stamp(model.meta.get("stamp"), "model", str(path))
    return model


def training_schedule(cfg: ExperimentConfig):
    # stress-free reference states carry no information and would zero the observation spread
    return build_schedule(cfg.paths, cfg.n_increments, beta_deg=0.0, include_identity=False)


def surrogate_config(cfg: ExperimentConfig) -> sg.SurrogateConfig:
    return sg.SurrogateConfig(n_r=cfg.n_r, mc_samples=cfg.mc_samples, steps=cfg.train_steps,
                              restart_period=cfg.restart_period, lr=cfg.lr, seed=cfg.surrogate_seed,
                              variational=cfg.variational)


def make_oracle(cfg: ExperimentConfig, pca_path) -> Oracle:
    if cfg.oracle == "external":
        if cfg.oracle_command:
            return ExternalOracle("subprocess", command=cfg.oracle_command, timeout=cfg.oracle_timeout)
        return ExternalOracle("directory", directory=cfg.oracle_dir, timeout=cfg.oracle_timeout)
    if pca_path is None:
        raise UsageError("the synthetic oracle needs --pca to featurize designs")
    pca, stats = open_pca(pca_path, cfg)

    @lru_cache(maxsize=None)
    def features_of(design_id, grid_bytes, n):
        from .designs import Microstructure

        grid = np.frombuffer(grid_bytes, np.uint8).reshape(n, n)
        return featurize(Microstructure(grid, design_id), pca, stats)

    ocfg = SyntheticOracleConfig(seed=cfg.oracle_seed, noise_std=cfg.noise_std, mismatch=cfg.mismatch,
                                 gain=cfg.gain, n_z=cfg.n_z)
    return SyntheticOracle(ocfg, lambda d: features_of(d.id, d.grid.tobytes(), d.n))


def campaign_config(cfg: ExperimentConfig) -> CampaignConfig:
    return CampaignConfig(n_targets=cfg.n_targets, combinations=cfg.combinations, eta=cfg.eta, e_max=cfg.e_max,
                          weights=cfg.weights, checkpoints=cfg.checkpoints, beta_deg=cfg.beta_deg, paths=cfg.paths,
                          n_increments=cfg.n_increments, shortlist_size=cfg.shortlist_size,
                          exclude_training=cfg.exclude_training, mc_samples=cfg.mc_samples,
                          seed=cfg.campaign_seed, jobs=cfg.jobs)


def align_features(pool: DesignPool, ids: np.ndarray, Z: np.ndarray) -> np.ndarray:
    if len(ids) != len(pool) or np.any(np.sort(ids) != pool.ids):
        raise UsageError("features file does not cover exactly the designs of the pool")
    return Z[np.argsort(ids)]


# ---------------------------------------------------------------- commands

def cmd_gen_pool(args, cfg):
    pool = generate_pool(cfg.pool_size, cfg.grid_n, cfg.pool_seed, tuple(cfg.quantile_range),
                         tuple(cfg.correlation_range) if cfg.correlation_range else None)
    save_pool(pool, args.out, reserved=pool_token(cfg))
    log.info("wrote %d designs (%dx%d) to %s", len(pool), cfg.grid_n, cfg.grid_n, args.out)


def cmd_featurize(args, cfg):
    pool = open_pool(args.pool, cfg)
    pca, stats, Z = featurize_pool(pool, cfg.n_z, cfg.stencil)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stamp = cfg.stamp("features")
    write_features_csv(out / "features.csv", pool.ids, Z, stamp)
    save_pca(out / "pca.bin", pca, stats, {"stamp": stamp})
    ratio = pca.explained_variance / pca.explained_variance.sum()
    log.info("PCA variance share of retained components: %s", np.round(ratio, 3).tolist())


def _labels_to_obs(labels: dict, ids, schedule) -> np.ndarray:
    keys = [(s.path, s.h) for s in schedule]
    out = []
    for i in ids:
        rows = labels.get(int(i))
        if rows is None:
            raise UsageError(f"labels lack design {i}")
        if [(p, h) for p, h, _ in rows] != keys:
            raise UsageError(f"labels for design {i} do not follow the training schedule")
        out.append(np.array([[v[0], v[1]] for _, _, v in rows]))
    return np.stack(out)


def cmd_label(args, cfg):
    pool = open_pool(args.pool, cfg)
    oracle = make_oracle(cfg, args.pca)
    sched = training_schedule(cfg)
    ids = [int(t) for t in args.ids.split(",")] if args.ids else list(pool.ids)
    rows = [(i, s, P) for i in ids for s, P in zip(sched, oracle.evaluate(pool[i], sched))]
    write_stress_csv(rows, args.out, cfg.stamp("oracle"))
    log.info("labeled %d designs with %d oracle calls", len(ids), oracle.count)


def cmd_train(args, cfg):
    ids, Z = open_features(args.features, cfg)
    cfg.check_stamp(read_comment(args.labels), "oracle", str(args.labels))
    labels = read_stress_csv(args.labels)
    sched = training_schedule(cfg)
    lab_ids = sorted(labels)
    row = {int(i): k for k, i in enumerate(ids)}
    Y = _labels_to_obs(labels, lab_ids, sched)
    stats = NormalizationStats(np.zeros(Z.shape[1]), np.ones(Z.shape[1])).with_observations(Y)
    data = sg.build_training_set(lab_ids, Z[[row[i] for i in lab_ids]], Y, stats)
    model = sg.train(data, observation_matrix(sched), stats, surrogate_config(cfg))
    sg.save_model(args.out, model, {"stamp": cfg.stamp("model")})
    log.info("trained on %d designs; final ELBO %.6g", len(lab_ids), model.history[-1] if model.history else float("nan"))


def _run_al(cfg, pool_path, features_path, pca_path, out_dir):
    pool = open_pool(pool_path, cfg)
    ids, Z = open_features(features_path, cfg)
    Z = align_features(pool, ids, Z)
    oracle = make_oracle(cfg, pca_path)
    sched = training_schedule(cfg)
    alc = ALConfig(n_init=cfg.n_init, n_test=cfg.n_test, t_max=cfg.t_max, eps=cfg.eps, window=cfg.window,
                   mc_samples=cfg.mc_samples, batch=cfg.batch, strategy=cfg.init_strategy,
                   acquisition=cfg.acquisition, score_cap=cfg.score_cap, retrain_steps=cfg.retrain_steps,
                   seed=cfg.al_seed, checkpoint_every=cfg.checkpoint_every,
                   checkpoint_dir=str(Path(out_dir) / "checkpoints") if cfg.checkpoint_every else None)
    res = run_active_learning(pool, Z, oracle, sched, alc, surrogate_config(cfg),
                              progress=lambda r: log.info("t=%d selected=%s mae=%.4g delta=%.3g", r.t,
                                                          r.selected_id, r.mae, r.delta))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stamp = cfg.stamp("model")
    sg.save_model(out / "model.bin", res.model, {"stamp": stamp})
    res.history.write_csv(out / "history.csv", stamp)
    write_stress_csv([(i, s, _obs_as_P(o)) for i in sorted(res.labels) for s, o in zip(sched, res.labels[i])],
                     out / "labels.csv", cfg.stamp("oracle"))
    part = {"labeled": res.partition.labeled, "unlabeled": len(res.partition.unlabeled), "test": res.partition.test,
            "oracle_calls": res.oracle_calls, "stamp": stamp}
    (out / "partition.json").write_text(json.dumps(part, indent=1))
    log.info("active learning finished after %d iterations, %d oracle calls", len(res.history) - 1, res.oracle_calls)
    return res


def _obs_as_P(obs: np.ndarray) -> np.ndarray:
    P = np.zeros((3, 3))
    P[0, 0], P[1, 1] = obs
    return P


def cmd_al(args, cfg):
    _run_al(cfg, args.pool, args.features, args.pca, args.out_dir)


def cmd_target(args, cfg):
    pool = open_pool(args.pool, cfg)
    oracle = make_oracle(cfg, args.pca)
    sched = build_schedule(cfg.paths, cfg.n_increments, beta_deg=cfg.beta_deg, include_identity=True)
    P = oracle.evaluate(pool[args.design_id], sched)
    active = normalize_active(args.active.split(","))
    w = np.asarray(cfg.weights, float)[[COMPONENTS.index(c) for c in active]]
    tgt = TargetSpec.from_stress(P, sched, active, weights=w, eta=cfg.eta, e_max=cfg.e_max, source_id=args.design_id)
    doc = tgt.to_json()
    doc["stamp"] = cfg.stamp("campaign")
    Path(args.out).write_text(json.dumps(doc, indent=1))


def cmd_select(args, cfg):
    model = open_model(args.model, cfg)
    pool = open_pool(args.pool, cfg)
    ids, Z = open_features(args.features, cfg)
    Z = align_features(pool, ids, Z)
    try:
        doc = json.loads(Path(args.target).read_text())
    except ValueError as exc:
        raise UsageError(f"{args.target} is not valid JSON") from exc
    target = TargetSpec.from_json(doc)
    oracle = make_oracle(cfg, args.pca)
    latent = sg.predict_latent(model, Z)
    rng = np.random.default_rng([cfg.campaign_seed, 0x5E1])
    exclude = [int(i) for i in model.data.ids] if cfg.exclude_training else ()
    res = run_selection(latent, pool.ids, oracle, target, cfg.mc_samples, rng, exclude=exclude,
                        shortlist_size=cfg.shortlist_size, design_lookup=pool.__getitem__)
    write_result_json(args.out, res, target, {"stamp": cfg.stamp("campaign"), "oracle_calls": oracle.count})
    state = "met" if res.met_threshold else "budget-limited"
    log.info("selected design %s (%s, nMAE %.4g) after %d oracle calls", res.final_id, state, res.final_nmae,
             res.n_evals)


def _run_campaign(cfg, model_path, pool_path, features_path, pca_path, out_dir):
    model = open_model(model_path, cfg)
    pool = open_pool(pool_path, cfg)
    ids, Z = open_features(features_path, cfg)
    Z = align_features(pool, ids, Z)
    oracle = make_oracle(cfg, pca_path)
    camp = run_campaign(model, pool, Z, oracle, campaign_config(cfg),
                        progress=lambda n, tot: log.debug("selection run %d/%d", n, tot))
    write_campaign(camp, out_dir, cfg.stamp("campaign"))
    log.info("campaign: %d selection runs, %d selection-phase oracle calls, %d target calls",
             len(camp.runs), camp.selection_calls, camp.target_calls)
    return camp


def cmd_campaign(args, cfg):
    _run_campaign(cfg, args.model, args.pool, args.features, args.pca, args.out_dir)


def render_report(campaign_dir, out_dir, e_max: int, history=None, baseline=None, fmt: str = "svg") -> list[Path]:
    from . import plotting

    cdir, out = Path(campaign_dir), Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tables = {}
    for name in TABLES:
        p = cdir / name
        if not p.exists():
            raise FileNotFoundError(f"{p} is missing; run the campaign stage first")
        tables[name] = read_table(p)[0]
    files = [
        plotting.hit_rate_curves(tables["summary.csv"], e_max, out / f"hit_rate.{fmt}"),
        plotting.e_eta_histogram(tables["e_eta_histogram.csv"], out / f"e_eta_histogram.{fmt}"),
        plotting.nmae_histogram(tables["nmae_histogram.csv"], out / f"nmae_histogram.{fmt}"),
        plotting.parity_plot(tables["parity.csv"], out / f"parity.{fmt}"),
    ]
    if history:
        hist_rows = read_table(history)[0]
        base_rows = read_table(baseline)[0] if baseline else None
        files.append(plotting.learning_curve(hist_rows, out / f"learning_curve.{fmt}", base_rows))
    files.append(_write_text_summary(tables, out / "summary.txt"))
    return files


def _write_text_summary(tables: dict, path) -> Path:
    hr = tables["hit_rates.csv"]
    budget = {r["quantity"]: r["value"] for r in tables["oracle_budget.csv"]}
    lines = [f"baygds {__version__} campaign report", ""]
    if hr:
        rate_cols = [k for k in hr[0] if k.startswith("R_le_")]
        r2_cols = [k for k in hr[0] if k.startswith("R2_")]
        head = ["combination"] + [f"R(<={c[5:]})%" for c in rate_cols] + r2_cols
        lines.append("  ".join(f"{h:>12}" for h in head))
        for r in hr:
            cells = [r["combination"]] + [f"{100 * float(r[c]):.1f}" for c in rate_cols]
            cells += [f"{float(r[c]):.3f}" if r[c] else "-" for c in r2_cols]
            lines.append("  ".join(f"{c:>12}" for c in cells))
    lines += ["", "oracle budget:"] + [f"  {k}: {v}" for k, v in budget.items()]
    Path(path).write_text("\n".join(lines) + "\n")
    return Path(path)


def cmd_report(args, cfg):
    cfg.check_stamp(read_comment(Path(args.campaign_dir) / "summary.csv"), "campaign", "summary.csv")
    files = render_report(args.campaign_dir, args.out_dir or args.campaign_dir, cfg.e_max, args.history,
                          args.baseline, args.format)
    log.info("wrote %s", ", ".join(str(f) for f in files))


def cmd_run(args, cfg):
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(cfg.to_yaml())
    pool_path = out / "pool.bgds"
    cmd_gen_pool(argparse.Namespace(out=pool_path), cfg)
    cmd_featurize(argparse.Namespace(pool=pool_path, out_dir=out), cfg)
    _run_al(cfg, pool_path, out / "features.csv", out / "pca.bin", out)
    _run_campaign(cfg, out / "model.bin", pool_path, out / "features.csv", out / "pca.bin", out / "campaign")
    if not args.no_report:
        render_report(out / "campaign", out / "report", cfg.e_max, out / "history.csv", fmt=args.format)


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="baygds", description="Bayesian-guided design selection from a finite pool.")
    p.add_argument("--version", action="version", version=f"baygds {__version__}")
    p.add_argument("--config", help="YAML config; BAYGDS_<KEY> environment variables override it")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(func=fn)
        return sp

    sp = add("gen-pool", cmd_gen_pool, "generate the design pool")
    sp.add_argument("--out", required=True)
    sp.add_argument("--size", type=int, dest="pool_size")
    sp.add_argument("--seed", type=int, dest="pool_seed")
    sp.add_argument("--n", type=int, dest="grid_n")

    sp = add("featurize", cmd_featurize, "two-point statistics + PCA features")
    sp.add_argument("--pool", required=True)
    sp.add_argument("--out-dir", required=True)

    sp = add("label", cmd_label, "query the oracle on the training schedule")
    sp.add_argument("--pool", required=True)
    sp.add_argument("--pca")
    sp.add_argument("--ids", help="comma-separated design ids (default: all)")
    sp.add_argument("--out", required=True)

    sp = add("train", cmd_train, "train the surrogate on labeled designs")
    sp.add_argument("--features", required=True)
    sp.add_argument("--labels", required=True)
    sp.add_argument("--out", required=True)

    sp = add("al", cmd_al, "active learning")
    sp.add_argument("--pool", required=True)
    sp.add_argument("--features", required=True)
    sp.add_argument("--pca")
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--oracle", choices=("synthetic", "external"))
    sp.add_argument("--tmax", type=int, dest="t_max")
    sp.add_argument("--eps", type=float)
    sp.add_argument("--window", type=int)

    sp = add("target", cmd_target, "write a target file from one pool design's oracle response")
    sp.add_argument("--pool", required=True)
    sp.add_argument("--pca")
    sp.add_argument("--design-id", type=int, required=True)
    sp.add_argument("--active", default="11,22,12")
    sp.add_argument("--out", required=True)

    sp = add("select", cmd_select, "select a design for one target")
    sp.add_argument("--model", required=True)
    sp.add_argument("--target", required=True)
    sp.add_argument("--pool", required=True)
    sp.add_argument("--features", required=True)
    sp.add_argument("--pca")
    sp.add_argument("--oracle", choices=("synthetic", "external"))
    sp.add_argument("--out", required=True)

    sp = add("campaign", cmd_campaign, "selection campaign over many targets")
    sp.add_argument("--model", required=True)
    sp.add_argument("--pool", required=True)
    sp.add_argument("--features", required=True)
    sp.add_argument("--pca")
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--jobs", type=int)

    sp = add("report", cmd_report, "render figures and a text summary from campaign outputs")
    sp.add_argument("--campaign-dir", required=True)
    sp.add_argument("--out-dir")
    sp.add_argument("--history")
    sp.add_argument("--baseline", help="history CSV of a random-acquisition run")
    sp.add_argument("--format", choices=("svg", "png", "pdf"), default="svg")

    sp = add("run", cmd_run, "whole pipeline in one output directory")
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--no-report", action="store_true")
    sp.add_argument("--format", choices=("svg", "png", "pdf"), default="svg")
    return p


OVERRIDE_KEYS = ("pool_size", "pool_seed", "grid_n", "t_max", "eps", "window", "oracle", "jobs")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    log.setLevel(logging.INFO if args.verbose == 0 else logging.DEBUG)
    try:
        overrides = {k: getattr(args, k) for k in OVERRIDE_KEYS if getattr(args, k, None) is not None}
        cfg = load_config(args.config, overrides=overrides)
        args.func(args, cfg)
    except (UsageError,) + USER_ERRORS as exc:
        print(f"baygds: error: {exc}", file=sys.stderr)
        return EXIT_USER
    except sg.SurrogateError as exc:
        print(f"baygds: training failed: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as exc:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        print(f"baygds: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
