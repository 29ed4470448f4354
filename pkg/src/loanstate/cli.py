"""Batch command-line entry point: synth -> prepare -> train -> eval ->
sensitivity / interact / pdp -> simulate -> portfolio, plus a consolidated
report. Every command is driven by a JSON config, emits CSV/JSON artifacts
into --out, and writes exactly one manifest recording config hash, seeds, and
artifact hashes.

Exit codes: 0 success; 2 config validation error (the message names the
offending key); 3 runtime failure (divergence, corrupt input).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import analysis, evalmetrics, pipeline, risk, synth
from .core import (
    CURRENT,
    NON_ABSORBING_STATES,
    PAIDOFF,
    STATE_NAMES,
    empirical_transition_matrix,
    state_index,
)
from .network import ModelFileError
from .trainer import EnsembleModel, TrainConfig, TrainingDiverged, grid_search, nll_loss, sgd_train, train_ensemble

VERSION = 1


class ConfigError(Exception):
    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"config key {key!r}: {message}")


def cfg_get(cfg: dict, key: str, kind, required: bool = False, default=None, where: str = ""):
    """Pull and type-check one config value; errors name the offending key."""
    label = f"{where}.{key}" if where else key
    if key not in cfg or cfg[key] is None:
        if required:
            raise ConfigError(label, "missing required value")
        return default
    value = cfg[key]
    if kind is int and isinstance(value, bool):
        raise ConfigError(label, "expected an integer")
    if kind is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if not isinstance(value, kind):
        raise ConfigError(label, f"expected {getattr(kind, '__name__', kind)}, got {type(value).__name__}")
    return value


def _positive(value, key):
    if value is not None and value <= 0:
        raise ConfigError(key, f"must be positive, got {value}")
    return value


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _hash_config(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def write_manifest(out_dir: Path, command: str, cfg: dict, inputs: list, outputs: list,
                   seeds: dict, t0: float) -> Path:
    manifest = {
        "version": VERSION,
        "command": command,
        "config_hash": _hash_config(cfg),
        "inputs": [str(p) for p in inputs],
        "outputs": {str(p.relative_to(out_dir)): _sha256(p) for p in outputs},
        "seeds": seeds,
        "wall_time": round(time.monotonic() - t0, 3),
    }
    path = out_dir / f"manifest_{command}.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def _load_config(path: str) -> dict:
    p = Path(path)
    if not p.exists():
        raise ConfigError("--config", f"file not found: {path}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError("--config", f"invalid JSON in {path}: {e}") from e


def _ensure_out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    t0 = time.monotonic()
    cfg = _load_config(args.config)
    out = _ensure_out(args)
    syn_cfg_dict = cfg_get(cfg, "synthetic", dict, required=True)
    try:
        syn_cfg = synth.SyntheticConfig.from_json_dict(syn_cfg_dict)
    except (TypeError, ValueError) as e:
        raise ConfigError("synthetic", str(e)) from e
    if args.seed is not None:
        syn_cfg = synth.SyntheticConfig.from_json_dict({**syn_cfg_dict, "seed": args.seed})
    bundle = synth.generate_panel(syn_cfg)
    static_path = out / "static.csv"
    monthly_path = out / "monthly.csv"
    bundle.write_csv(static_path, monthly_path)
    (out / "schema.json").write_text(json.dumps(bundle.schema.to_json_dict(), indent=1))
    emp = empirical_transition_matrix(bundle.panel)
    (out / "empirical_matrix.csv").write_text(emp.to_csv())
    outputs = [static_path, monthly_path, out / "schema.json", out / "empirical_matrix.csv"]
    write_manifest(out, "synth", cfg, [args.config], outputs, {"seed": syn_cfg.seed}, t0)
    print(f"synth: {len(bundle.panel)} loan-months for {syn_cfg.num_loans} loans -> {out}")
    return 0


def _read_schema(path) -> "synth.FeatureSchema":
    from .core import FeatureSchema

    return FeatureSchema.from_json_dict(json.loads(Path(path).read_text()))


def cmd_prepare(args) -> int:
    t0 = time.monotonic()
    cfg = _load_config(args.config)
    out = _ensure_out(args)
    static_csv = cfg_get(cfg, "static_csv", str, required=True)
    monthly_csv = cfg_get(cfg, "monthly_csv", str, required=True)
    schema_path = cfg_get(cfg, "schema", str)
    split = cfg_get(cfg, "split", dict, required=True)
    train_end = cfg_get(split, "train_end", int, required=True, where="split")
    valid_end = cfg_get(split, "valid_end", int, required=True, where="split")
    if train_end >= valid_end:
        raise ConfigError("split.train_end", "must be before split.valid_end")
    num_shards = _positive(cfg_get(cfg, "num_shards", int, default=4), "num_shards")
    seed = args.seed if args.seed is not None else cfg_get(cfg, "seed", int, default=0)

    schema = _read_schema(schema_path) if schema_path else synth.default_schema()
    for p in (static_csv, monthly_csv):
        if not Path(p).exists():
            raise ConfigError("static_csv" if p == static_csv else "monthly_csv", f"file not found: {p}")
    panel, report = pipeline.load_panel_csv(schema, static_csv, monthly_csv)
    train, valid, test = pipeline.temporal_split(panel, train_end, valid_end)
    stats = pipeline.fit_normalization(train.covariates, mask=schema.normalize_mask())
    outputs = []
    for name, part in (("train", train), ("valid", valid), ("test", test)):
        part_norm = pipeline.Panel(
            part.loan_ids, part.periods, pipeline.apply_normalization(stats, part.covariates),
            part.states, part.next_states, schema,
        )
        layout = pipeline.write_shards(part_norm, out / name, num_shards, seed)
        outputs.extend(layout.shard_path(k) for k in range(num_shards))
        outputs.append(out / name / "layout.json")
    (out / "schema.json").write_text(json.dumps(schema.to_json_dict(), indent=1))
    (out / "stats.json").write_text(json.dumps(stats.to_json_dict(), indent=1))
    (out / "drop_report.json").write_text(json.dumps(report.to_json_dict(), indent=1))
    outputs += [out / "schema.json", out / "stats.json", out / "drop_report.json"]
    write_manifest(out, "prepare", cfg, [args.config, static_csv, monthly_csv], outputs,
                   {"seed": seed}, t0)
    print(
        f"prepare: kept {report.kept} rows (dropped {report.dropped}); "
        f"train/valid/test = {len(train)}/{len(valid)}/{len(test)} -> {out}"
    )
    return 0


def _train_config_from_dict(d: dict, where: str) -> TrainConfig:
    known = {
        "hidden", "activation", "keep_prob", "lr0", "half_life", "momentum",
        "batch_size", "epochs", "samples_per_epoch", "l2_lambda", "seed",
        "bootstrap", "snapshot_best", "l2_include_biases",
    }
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"{where}.{sorted(unknown)[0]}", "unknown training option")
    kwargs = dict(d)
    if "hidden" in kwargs:
        kwargs["hidden"] = tuple(kwargs["hidden"])
    if "keep_prob" in kwargs and isinstance(kwargs["keep_prob"], list):
        kwargs["keep_prob"] = tuple(kwargs["keep_prob"])
    try:
        return TrainConfig(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(where, str(e)) from e


def _load_split(prepare_dir: Path, name: str):
    layout = pipeline.ShardLayout.load(prepare_dir / name)
    return pipeline.load_shards(layout)


def cmd_train(args) -> int:
    t0 = time.monotonic()
    cfg = _load_config(args.config)
    out = _ensure_out(args)
    prepare_dir = Path(cfg_get(cfg, "prepare_dir", str, required=True))
    if not (prepare_dir / "schema.json").exists():
        raise ConfigError("prepare_dir", f"no prepared data at {prepare_dir}")
    grid_dicts = cfg_get(cfg, "grid", list)
    single = cfg_get(cfg, "train", dict)
    if grid_dicts is None and single is None:
        raise ConfigError("train", "provide either 'train' or a 'grid' of training configs")
    ens_cfg = cfg_get(cfg, "ensemble", dict, default={})
    n_members = _positive(cfg_get(ens_cfg, "members", int, default=1, where="ensemble"), "ensemble.members")
    refit = cfg_get(cfg, "refit", bool, default=False)

    # validate every training config before touching data
    if args.seed is not None and single is not None:
        single = {**single, "seed": args.seed}
    grid = (
        [_train_config_from_dict(d, f"grid[{i}]") for i, d in enumerate(grid_dicts)]
        if grid_dicts is not None
        else None
    )
    single_cfg = _train_config_from_dict(single, "train") if single is not None else None

    schema = _read_schema(prepare_dir / "schema.json")
    stats = pipeline.NormalizationStats.from_json_dict(json.loads((prepare_dir / "stats.json").read_text()))
    Xtr, _, ytr = _load_split(prepare_dir, "train")
    Xva, _, yva = _load_split(prepare_dir, "valid")

    outputs = []
    leaderboard_rows = None
    if grid is not None:
        result = grid_search(grid, (Xtr, ytr), (Xva, yva))
        best_cfg, best = result.best_config, result.best_result
        result.write_leaderboard_csv(out / "leaderboard.csv")
        outputs.append(out / "leaderboard.csv")
        leaderboard_rows = len(result.leaderboard)
    else:
        best_cfg = single_cfg
        best = None

    if refit:
        union = (np.concatenate([Xtr, Xva]), np.concatenate([ytr, yva]))
        train_data = union
        valid_data = None
    else:
        train_data = (Xtr, ytr)
        valid_data = (Xva, yva)

    if n_members > 1:
        bootstrap = cfg_get(ens_cfg, "bootstrap", bool, default=True, where="ensemble")
        from dataclasses import replace

        model = train_ensemble(
            replace(best_cfg, bootstrap=bootstrap), train_data, valid_data,
            n_members=n_members, schema=schema, stats=stats,
        )
        result_for_log = None
    else:
        result_for_log = sgd_train(best_cfg, train_data, valid_data) if (best is None or refit) else best
        model = EnsembleModel(
            members=(result_for_log.params,), schema=schema, stats=stats,
            member_seeds=(best_cfg.seed,), meta={"train_config": str(best_cfg)},
        )
    model.save(out / "model.json")
    outputs.append(out / "model.json")
    if result_for_log is not None:
        result_for_log.write_log_csv(out / "training_log.csv")
        outputs.append(out / "training_log.csv")
    summary = {
        "train_rows": len(ytr),
        "valid_rows": len(yva),
        "members": n_members,
        "refit_on_train_plus_valid": refit,
        "valid_loss": None if len(yva) == 0 else nll_loss(model, (Xva, yva)),
        "grid_points": leaderboard_rows,
    }
    (out / "train_summary.json").write_text(json.dumps(summary, indent=1))
    outputs.append(out / "train_summary.json")
    write_manifest(out, "train", cfg, [args.config, prepare_dir], outputs,
                   {"seed": best_cfg.seed}, t0)
    print(f"train: model saved ({n_members} member(s)), valid loss {summary['valid_loss']} -> {out}")
    return 0


def _load_model(path) -> EnsembleModel:
    try:
        return EnsembleModel.load(path)
    except (ModelFileError, FileNotFoundError) as e:
        raise RuntimeError(f"cannot load model {path}: {e}") from e


def cmd_eval(args) -> int:
    t0 = time.monotonic()
    cfg = _load_config(args.config)
    out = _ensure_out(args)
    model_path = cfg_get(cfg, "model", str, required=True)
    prepare_dir = Path(cfg_get(cfg, "prepare_dir", str, required=True))
    null_path = cfg_get(cfg, "null_model", str)
    model = _load_model(model_path)
    Xte, ste, yte = _load_split(prepare_dir, "test")
    if len(yte) == 0:
        raise RuntimeError("test split is empty; nothing to evaluate")
    panel = pipeline.Panel([""] * len(yte), np.zeros(len(yte)), Xte, ste, yte, model.schema)
    test_loss = nll_loss(model, (Xte, yte))
    matrix = evalmetrics.transition_auc_matrix(model, panel)
    (out / "auc_matrix.csv").write_text(evalmetrics.auc_matrix_to_csv(matrix))
    outputs = [out / "auc_matrix.csv"]
    for u in NON_ABSORBING_STATES:
        if matrix[u][PAIDOFF] is None:
            continue
        _, curve = evalmetrics.transition_auc(model, panel, u, PAIDOFF)
        path = out / f"roc_{STATE_NAMES[u]}_PaidOff.csv"
        path.write_text(curve.to_csv())
        outputs.append(path)
    report = {
        "test_rows": len(yte),
        "test_loss": test_loss,
        "model_params": model.num_params(),
        "auc_current_to_paidoff": matrix[CURRENT][PAIDOFF],
    }
    if null_path:
        null_model = _load_model(null_path)
        null_loss = nll_loss(null_model, (Xte, yte))
        lr = evalmetrics.lr_statistic(
            null_loss, test_loss, len(yte),
            df=max(model.num_params() - null_model.num_params(), 1),
        )
        report["null_model"] = {
            "path": str(null_path),
            "loss": null_loss,
            "lr_statistic": lr.statistic,
            "df": lr.df,
            "p_value": lr.p_value,
        }
    (out / "eval.json").write_text(json.dumps(report, indent=1))
    outputs.append(out / "eval.json")
    write_manifest(out, "eval", cfg, [args.config, model_path, prepare_dir], outputs, {}, t0)
    print(f"eval: test loss {test_loss:.6f} on {len(yte)} rows -> {out}")
    return 0


def _conditioning(cfg, model, prepare_dir, default_cap=20000):
    u = state_index(cfg_get(cfg, "u", str, default="Current"))
    v = state_index(cfg_get(cfg, "v", str, default="PaidOff"))
    cap = _positive(cfg_get(cfg, "cap", int, default=default_cap), "cap")
    split = cfg_get(cfg, "split", str, default="test")
    X, s, y = _load_split(prepare_dir, split)
    panel = pipeline.Panel([""] * len(y), np.zeros(len(y)), X, s, y, model.schema)
    cond = analysis.conditioning_set(panel, u, cap=cap, seed=cfg_get(cfg, "seed", int, default=0))
    return u, v, cond, panel


def cmd_sensitivity(args) -> int:
    t0 = time.monotonic()
    cfg = _load_config(args.config)
    out = _ensure_out(args)
    model = _load_model(cfg_get(cfg, "model", str, required=True))
    prepare_dir = Path(cfg_get(cfg, "prepare_dir", str, required=True))
    u, v, cond, panel = _conditioning(cfg, model, prepare_dir)
    report = analysis.sensitivity_report(model, cond, v, schema=model.schema)
    path = out / f"sensitivity_{STATE_NAMES[u]}_{STATE_NAMES[v]}.csv"
    path.write_text(report.to_csv())

    loo_fields = cfg_get(cfg, "leave_one_out", bool, default=True)
    outputs = [path]
    if loo_fields:
        Xte, _, yte = _load_split(prepare_dir, "test")
        loo = analysis.leave_one_out_report(model, (Xte, yte), model.schema)
        loo_path = out / "leave_one_out.csv"
        loo_path.write_text(loo.to_csv())
        outputs.append(loo_path)
    write_manifest(out, "sensitivity", cfg, [args.config], outputs, {}, t0)
    print(f"sensitivity: top factor {report.entries[0][0]} -> {out}")
    return 0


def cmd_interact(args) -> int:
    t0 = time.monotonic()
    cfg = _load_config(args.config)
    out = _ensure_out(args)
    model = _load_model(cfg_get(cfg, "model", str, required=True))
    prepare_dir = Path(cfg_get(cfg, "prepare_dir", str, required=True))
    u, v, cond, _ = _conditioning(cfg, model, prepare_dir, default_cap=2000)
    delta = cfg_get(cfg, "delta", float, default=analysis.DEFAULT_DELTA)
    mode = cfg_get(cfg, "mode", str, default="prob")
    prefilter_m = _positive(cfg_get(cfg, "prefilter_m", int, default=10), "prefilter_m")
    scheme = cfg_get(cfg, "scheme", str, default=analysis.EIGHT_POINT)
    outputs = []
    if cfg_get(cfg, "pairs", bool, default=True):
        pairs = analysis.rank_pairs(model, cond, v, delta=delta, mode=mode, schema=model.schema)
        p = out / f"pairs_{STATE_NAMES[u]}_{STATE_NAMES[v]}.csv"
        p.write_text(pairs.to_csv())
        outputs.append(p)
    if cfg_get(cfg, "triples", bool, default=True):
        triples = analysis.rank_triples(
            model, cond, v, prefilter_m=prefilter_m, delta=delta, mode=mode,
            scheme=scheme, schema=model.schema,
        )
        p = out / f"triples_{STATE_NAMES[u]}_{STATE_NAMES[v]}.csv"
        p.write_text(triples.to_csv())
        outputs.append(p)
    if not outputs:
        raise ConfigError("pairs", "enable at least one of 'pairs' or 'triples'")
    write_manifest(out, "interact", cfg, [args.config], outputs, {}, t0)
    print(f"interact: wrote {len(outputs)} report(s) -> {out}")
    return 0


def cmd_pdp(args) -> int:
    t0 = time.monotonic()
    cfg = _load_config(args.config)
    out = _ensure_out(args)
    model = _load_model(cfg_get(cfg, "model", str, required=True))
    features = cfg_get(cfg, "features", list, required=True)
    if not 1 <= len(features) <= 3:
        raise ConfigError("features", "supply 1 to 3 feature names")
    n_points = _positive(cfg_get(cfg, "grid_points", int, default=21), "grid_points")
    state = state_index(cfg_get(cfg, "state", str, default="Current"))
    stats = model.stats
    grids = []
    for name in features:
        try:
            c = model.schema.column_index(name)
        except KeyError as e:
            raise ConfigError("features", str(e)) from e
        grids.append(np.linspace(stats.col_min[c], stats.col_max[c], n_points))
    table = analysis.partial_dependence(model, model.schema, stats, features, grids, state=state)
    path = out / ("pdp_" + "_".join(features) + ".csv")
    path.write_text(table.to_csv())
    write_manifest(out, "pdp", cfg, [args.config], [path], {}, t0)
    print(f"pdp: {len(table.grid_points)} grid points -> {path}")
    return 0


def pool_from_csv(schema, static_csv, monthly_csv, period: int, max_loans: int | None = None):
    """Pool snapshot: loans active at the given period, as raw records."""
    static = {r["loan_id"]: r for r in pipeline.read_csv_records(static_csv)}
    records = []
    for row in pipeline.read_csv_records(monthly_csv):
        if int(row["period"]) != period or row["loan_id"] not in static:
            continue
        rec = dict(static[row["loan_id"]])
        rec.update(row)
        records.append(rec)
        if max_loans is not None and len(records) >= max_loans:
            break
    # numeric fields arrive as strings from CSV
    numeric = {f.name for f in schema.raw_fields if f.kind == "numeric"}
    for rec in records:
        for k in list(rec):
            if k in numeric:
                rec[k] = float(rec[k]) if rec[k] != "" else None
    return records


def realized_outcomes(monthly_csv, loan_ids, period: int, horizon: int):
    """State of each loan at period + horizon, from the panel itself; loans
    absorbed earlier keep their absorbing state."""
    target = period + horizon
    by_loan: dict[str, dict[int, tuple[int, int]]] = {}
    for row in pipeline.read_csv_records(monthly_csv):
        by_loan.setdefault(row["loan_id"], {})[int(row["period"])] = (
            state_index(row["state"]), state_index(row["next_state"]),
        )
    out = []
    for lid in loan_ids:
        hist = by_loan[lid]
        if target in hist:
            out.append(hist[target][0])
            continue
        last = max(hist)
        if last < target:
            out.append(hist[last][1])  # absorbed before the horizon
        else:
            raise RuntimeError(f"loan {lid} has no observable outcome at period {target}")
    return np.array(out, dtype=np.int64)


def cmd_simulate(args) -> int:
    t0 = time.monotonic()
    cfg = _load_config(args.config)
    out = _ensure_out(args)
    model = _load_model(cfg_get(cfg, "model", str, required=True))
    static_csv = cfg_get(cfg, "static_csv", str, required=True)
    monthly_csv = cfg_get(cfg, "monthly_csv", str, required=True)
    period = cfg_get(cfg, "period", int, default=0)
    horizon = _positive(cfg_get(cfg, "horizon", int, default=12), "horizon")
    npaths = _positive(cfg_get(cfg, "npaths", int, default=200), "npaths")
    max_loans = cfg_get(cfg, "max_loans", int)
    seed = args.seed if args.seed is not None else cfg_get(cfg, "seed", int, default=0)
    target = state_index(cfg_get(cfg, "target_state", str, default="PaidOff"))
    macro_dict = cfg_get(cfg, "macro", dict)
    rate_model = synth.NationalRateParams(**macro_dict) if macro_dict else None

    records = pool_from_csv(model.schema, static_csv, monthly_csv, period, max_loans)
    if not records:
        raise RuntimeError(f"no active loans at period {period}")
    dist = risk.simulate_pool_mc(model, records, horizon, npaths, seed, rate_model=rate_model)
    (out / "pool_counts.csv").write_text(dist.counts_csv())

    cols = risk.pool_columns(records)
    states0 = risk.initial_states(cols, len(records))
    product = risk.multi_period_matrices(model, cols, len(records), risk.FROZEN_EVOLVER, horizon)
    p_target = product[np.arange(len(records)), states0, target]
    p_current = product[np.arange(len(records)), states0, CURRENT]
    poisson = risk.pool_poisson(p_target, state=target)
    normal = risk.pool_normal(p_target, state=target)
    stats_doc = {
        "pool_size": len(records),
        "horizon": horizon,
        "npaths": npaths,
        "target_state": STATE_NAMES[target],
        "macro_simulated": rate_model is not None,
        "mc_mean": dist.mean(target),
        "mc_std": dist.std(target),
        "poisson": {"mean": poisson.mean_value, "variance": poisson.variance},
        "normal": {"mean": normal.mean_value, "variance": normal.variance},
        "mean_p_current": float(p_current.mean()),
    }
    (out / "pool_stats.json").write_text(json.dumps(stats_doc, indent=1))
    outputs = [out / "pool_counts.csv", out / "pool_stats.json"]
    write_manifest(out, "simulate", cfg, [args.config, static_csv, monthly_csv], outputs,
                   {"seed": seed}, t0)
    print(
        f"simulate: pool of {len(records)}, {npaths} paths, "
        f"E[{STATE_NAMES[target]}] = {dist.mean(target):.2f} -> {out}"
    )
    return 0


def cmd_portfolio(args) -> int:
    t0 = time.monotonic()
    cfg = _load_config(args.config)
    out = _ensure_out(args)
    model = _load_model(cfg_get(cfg, "model", str, required=True))
    baseline_path = cfg_get(cfg, "baseline_model", str)
    static_csv = cfg_get(cfg, "static_csv", str, required=True)
    monthly_csv = cfg_get(cfg, "monthly_csv", str, required=True)
    period = cfg_get(cfg, "period", int, default=0)
    horizon = _positive(cfg_get(cfg, "horizon", int, default=1), "horizon")
    n_select = _positive(cfg_get(cfg, "n_select", int, default=100), "n_select")
    max_loans = cfg_get(cfg, "max_loans", int)
    pool_size = _positive(cfg_get(cfg, "pool_size", int, default=1000), "pool_size")
    rank_key = cfg_get(cfg, "rank_key", str, default="original_rate")

    records = pool_from_csv(model.schema, static_csv, monthly_csv, period, max_loans)
    if n_select > len(records):
        raise ConfigError("n_select", f"exceeds pool size {len(records)}")
    sel = risk.select_portfolio(model, records, n_select, horizon)
    with open(out / "portfolio.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rank", "loan_id", "p_current"])
        for rank, (lid, p) in enumerate(zip(sel.loan_ids, sel.probabilities), start=1):
            w.writerow([rank, lid, f"{p!r}"])
    outputs = [out / "portfolio.csv"]

    outcomes = realized_outcomes(monthly_csv, [r["loan_id"] for r in records], period, horizon)
    notionals = np.array([r.get("current_balance") or 0.0 for r in records])
    loss_doc = {
        "selected_loss": risk.portfolio_loss(outcomes[sel.indices], notionals[sel.indices]),
        "pool_loss": risk.portfolio_loss(outcomes, notionals),
        "selected_not_current": int((outcomes[sel.indices] != CURRENT).sum()),
        "pool_not_current": int((outcomes != CURRENT).sum()),
        "n_select": n_select,
        "horizon": horizon,
    }
    if baseline_path:
        base_model = _load_model(baseline_path)
        n_grid = cfg_get(cfg, "n_grid", list,
                         default=[0, len(records) // 4, len(records) // 2, len(records)])
        rows = risk.portfolio_comparison_curve(model, base_model, records, outcomes,
                                               n_grid=[int(n) for n in n_grid], horizon=horizon)
        with open(out / "comparison.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["N", "not_current_model", "not_current_baseline"])
            for row in rows:
                w.writerow([row["N"], row["model_a"], row["model_b"]])
        outputs.append(out / "comparison.csv")
        base_sel = risk.select_portfolio(base_model, records, n_select, horizon)
        loss_doc["baseline_selected_loss"] = risk.portfolio_loss(
            outcomes[base_sel.indices], notionals[base_sel.indices]
        )
    # ranked pools by the configured characteristic
    key_vals = np.array([float(r.get(rank_key) or 0.0) for r in records])
    pools = risk.make_ranked_pools(records, key_vals, pool_size)
    loss_doc["ranked_pools"] = {"key": rank_key, "pool_size": pool_size, "count": len(pools)}
    (out / "loss.json").write_text(json.dumps(loss_doc, indent=1))
    outputs.append(out / "loss.json")
    write_manifest(out, "portfolio", cfg, [args.config, static_csv, monthly_csv], outputs, {}, t0)
    print(
        f"portfolio: selected {n_select}, loss {loss_doc['selected_loss']:.0f} "
        f"(pool {loss_doc['pool_loss']:.0f}) -> {out}"
    )
    return 0


def cmd_report(args) -> int:
    t0 = time.monotonic()
    cfg = _load_config(args.config) if args.config else {}
    out = _ensure_out(args)
    dirs = cfg_get(cfg, "artifact_dirs", list, default=None) if cfg else None
    roots = [Path(d) for d in dirs] if dirs else [out.parent if out.parent != out else out]
    manifests = []
    for root in roots:
        manifests.extend(sorted(root.glob("**/manifest_*.json")))
    summary = {"manifests": [], "missing": []}
    lines = []
    for m in manifests:
        try:
            doc = json.loads(m.read_text())
        except json.JSONDecodeError:
            summary["missing"].append(str(m))
            continue
        entry = {"command": doc["command"], "path": str(m), "config_hash": doc["config_hash"],
                 "wall_time": doc["wall_time"], "outputs": list(doc["outputs"])}
        art_dir = m.parent
        for fname in ("train_summary.json", "eval.json", "pool_stats.json", "loss.json"):
            f = art_dir / fname
            if f.exists():
                entry[fname.replace(".json", "")] = json.loads(f.read_text())
        summary["manifests"].append(entry)
        lines.append(f"{doc['command']:<12} {m.parent.name:<16} wall {doc['wall_time']:>8.2f}s "
                     f"config {doc['config_hash']}")
    (out / "report.json").write_text(json.dumps(summary, indent=1))
    print("\n".join(lines) if lines else "report: no manifests found")
    print(f"report: {len(summary['manifests'])} manifest(s) -> {out / 'report.json'}")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "prepare": cmd_prepare,
    "train": cmd_train,
    "eval": cmd_eval,
    "sensitivity": cmd_sensitivity,
    "interact": cmd_interact,
    "pdp": cmd_pdp,
    "simulate": cmd_simulate,
    "portfolio": cmd_portfolio,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="loanstate",
        description="Loan-state transition risk engine (batch pipeline).",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, required=name != "report")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--jobs", type=int, default=1)
        p.add_argument("--deterministic", action="store_true")
        p.add_argument("--out", default=f"artifacts/{name}")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except TrainingDiverged as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return 3
    except (RuntimeError, ModelFileError, ValueError, OSError) as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
