"""Command-line runner: ``dcelab {gen-data,train,eval,audit,calib-report}``.

Every command reads one YAML config; ``--set section.key=value`` overrides
single keys. Artifacts go under the output directory next to a
``manifest.json`` that records the config hash and seeds. JSON payloads
carry no timestamps, so identical inputs give byte-identical files.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 divergence.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np
import yaml

from .calibration import bank_score_grid, bank_scores, ece_binned, ece_pairwise, load_bank, save_bank
from .data import (
    DataError,
    GroundTruth,
    SynthConfig,
    generate_synthetic,
    load_ratings,
    load_table,
    save_table,
    save_tsv,
    split_validation,
    unbiased_test_set,
)
from .estimators import brute_force_moments, calibration_bound_audit, dr_bias, dr_variance, ideal_loss
from .metrics import evaluate
from .models import error_pair, heuristic_propensity, load_model, save_model
from .training import METHODS, DivergenceError, TrainConfig, train_method

logger = logging.getLogger("dcelab")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3

TOP_KEYS = {"seed", "seeds", "method", "methods", "synthetic", "data", "train",
            "test_items_per_user", "cutoffs", "audit", "calib"}
AUDIT_DEFAULTS = {"n_random": 100, "max_pairs": 100, "oracle_pairs": 12}
CALIB_DEFAULTS = {"n_bins": 15}


class ConfigError(ValueError):
    """Bad command line or config file."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- config


def _parse_override(item: str):
    if "=" not in item:
        raise ConfigError(f"--set expects key=value, got {item!r}")
    key, raw = item.split("=", 1)
    return key.strip().split("."), yaml.safe_load(raw)


def load_config(path, overrides=()) -> dict:
    cfg = {}
    if path is not None:
        try:
            with open(path) as fh:
                cfg = yaml.safe_load(fh) or {}
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a mapping")
    for item in overrides:
        keys, value = _parse_override(item)
        node = cfg
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot override inside non-mapping key {k!r}")
        node[keys[-1]] = value
    unknown = set(cfg) - TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if "synthetic" in cfg and "data" in cfg:
        raise ConfigError("give exactly one dataset source: 'synthetic' or 'data'")
    return cfg


def _coerce_numbers(cls, section):
    # YAML 1.1 reads 1e-3 (no dot) as a string
    out = dict(section or {})
    kinds = {f.name: str(f.type) for f in dataclasses.fields(cls)}
    for k, v in out.items():
        if isinstance(v, str) and "float" in kinds.get(k, ""):
            try:
                out[k] = float(v)
            except ValueError:
                pass
    return out


def _build(cls, section, name):
    if section is not None and not isinstance(section, dict):
        raise ConfigError(f"'{name}' must be a mapping")
    try:
        return cls(**_coerce_numbers(cls, section))
    except TypeError as exc:
        raise ConfigError(f"bad '{name}' section: {exc}") from None
    except ValueError as exc:
        raise ConfigError(f"bad '{name}' section: {exc}") from None


def resolve_dataset(cfg: dict) -> dict:
    """The dataset section with every default filled in."""
    if "data" in cfg:
        d = dict(cfg["data"] or {})
        if "train" not in d or "test" not in d:
            raise ConfigError("'data' needs 'train' and 'test' paths")
        extra = set(d) - {"train", "test", "rating_threshold", "layout"}
        if extra:
            raise ConfigError(f"unknown 'data' keys: {sorted(extra)}")
        d.setdefault("rating_threshold", 3.0)
        d.setdefault("layout", "auto")
        return {"source": "files", **d}
    synth = dict(cfg.get("synthetic") or {})
    if "seed" in cfg:
        synth.setdefault("seed", cfg["seed"])
    sc = _build(SynthConfig, synth, "synthetic")
    return {"source": "synthetic", **dataclasses.asdict(sc),
            "test_items_per_user": int(cfg.get("test_items_per_user", 16))}


def resolve_train(cfg: dict) -> tuple[TrainConfig, list[int], list[str]]:
    tc = _build(TrainConfig, cfg.get("train"), "train")
    seeds = cfg.get("seeds", [tc.seed])
    if isinstance(seeds, int):
        seeds = [seeds]
    if not seeds or not all(isinstance(s, int) for s in seeds):
        raise ConfigError("'seeds' must be a non-empty list of integers")
    methods = cfg.get("methods", [cfg.get("method", "dce-dr")])
    if isinstance(methods, str):
        methods = [methods]
    bad = [m for m in methods if m not in METHODS]
    if bad or not methods:
        raise ConfigError(f"unknown methods {bad}; choose from {list(METHODS)}")
    return tc, list(seeds), list(methods)


def config_hash(payload) -> str:
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


# ---------------------------------------------------------------- io helpers


def _dump_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not serializable: {type(obj)}")


def _prepare_out(out: Path, force: bool) -> Path:
    if out.exists() and any(out.iterdir()):
        if not force:
            raise ConfigError(f"{out} exists and is not empty; pass --force to overwrite")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _read_manifest(path: Path) -> dict:
    f = path / "manifest.json"
    if not f.exists():
        raise DataError(f"no manifest.json in {path}")
    return json.loads(f.read_text())


def _load_dataset(data_dir: Path):
    manifest = _read_manifest(data_dir)
    table = load_table(data_dir / "table.npz")
    test = load_table(data_dir / "test.npz")
    gt = GroundTruth.load(data_dir / "ground_truth.npz") if (data_dir / "ground_truth.npz").exists() else None
    return manifest, table, test, gt


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config, args.set)
    if args.seed is not None and "data" not in cfg:
        cfg.setdefault("synthetic", {})["seed"] = args.seed
    dataset = resolve_dataset(cfg)
    out = _prepare_out(Path(args.out), args.force)
    files = {"table": "table.npz", "table_tsv": "train.tsv", "test": "test.npz"}
    if dataset["source"] == "synthetic":
        synth = SynthConfig(**{k: v for k, v in dataset.items()
                               if k not in ("source", "test_items_per_user")})
        table, gt = generate_synthetic(synth)
        test = unbiased_test_set(gt, min(dataset["test_items_per_user"], synth.n_items), synth.seed + 1000)
        gt.save(out / "ground_truth.npz")
        files["ground_truth"] = "ground_truth.npz"
        seed = synth.seed
        full = bool(np.all(gt.p == 1.0))
    else:
        table, ids = load_ratings(dataset["train"], dataset["rating_threshold"], dataset["layout"])
        test, _ = load_ratings(dataset["test"], dataset["rating_threshold"], dataset["layout"], ids=ids)
        if (test.n_users, test.n_items) != (table.n_users, table.n_items):
            raise DataError("train and test matrices differ in shape")
        seed = None
        full = table.n_observed == table.n_pairs
    save_table(table, out / "table.npz")
    save_tsv(table, out / "train.tsv")
    save_table(test, out / "test.npz")
    manifest = {
        "command": "gen-data",
        "config_hash": config_hash(dataset),
        "dataset": dataset,
        "seed": seed,
        "n_users": table.n_users,
        "n_items": table.n_items,
        "n_pairs": table.n_pairs,
        "n_observed": table.n_observed,
        "n_test": test.n_observed,
        "full_observation": full,
        "files": files,
    }
    _dump_json(out / "manifest.json", manifest)
    logger.info("wrote %d observed of %d pairs to %s", table.n_observed, table.n_pairs, out)
    return EXIT_OK


def _save_stack(stack, run_dir: Path) -> dict:
    files = {"theta": "theta.npz"}
    save_model(stack.theta, run_dir / "theta.npz")
    for name in ("phi", "psi"):
        model = getattr(stack, name)
        if model is not None:
            save_model(model, run_dir / f"{name}.npz")
            files[name] = f"{name}.npz"
    for name in ("prop_bank", "imp_bank"):
        bank = getattr(stack, name)
        if bank is not None:
            save_bank(bank, run_dir / f"{name}.npz")
            files[name] = f"{name}.npz"
    return files


def _metric_row(method, seed, report, h):
    return {"method": method, "seed": seed, "mse": report.mse, "auc": report.auc,
            **{f"ndcg@{k}": v for k, v in report.ndcg.items()}, "config_hash": h}


def _write_csv(path: Path, rows: list[dict], header_note: str | None = None) -> None:
    if not rows:
        return
    with path.open("w", newline="") as fh:
        if header_note:
            fh.write(f"# {header_note}\n")
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def summarize(rows: list[dict], h: str) -> list[dict]:
    """Mean and sample standard deviation per method and metric."""
    out = []
    metrics = [k for k in rows[0] if k not in ("method", "seed", "config_hash")]
    for method in dict.fromkeys(r["method"] for r in rows):
        sub = [r for r in rows if r["method"] == method]
        for m in metrics:
            vals = np.array([r[m] for r in sub], dtype=np.float64)
            std = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
            out.append({"method": method, "metric": m, "mean": float(vals.mean()), "std": std,
                        "n_seeds": int(vals.size), "config_hash": h})
    return out


def paired_table(rows: list[dict], a="dr-jl", b="dce-dr") -> list[dict]:
    by = {(r["method"], r["seed"]): r for r in rows}
    out = []
    for seed in dict.fromkeys(r["seed"] for r in rows):
        if (a, seed) in by and (b, seed) in by:
            ra, rb = by[(a, seed)], by[(b, seed)]
            out.append({"seed": seed, f"mse_{a}": ra["mse"], f"mse_{b}": rb["mse"],
                        f"auc_{a}": ra["auc"], f"auc_{b}": rb["auc"],
                        f"{b}_lower_mse": rb["mse"] < ra["mse"], f"{b}_higher_auc": rb["auc"] > ra["auc"]})
    return out


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set)
    if args.seeds:
        cfg["seeds"] = [int(s) for s in args.seeds.split(",")]
    if args.method:
        cfg.pop("methods", None)
        cfg["method"] = args.method
    tc, seeds, methods = resolve_train(cfg)
    data_dir = Path(args.data)
    manifest, table, test, _ = _load_dataset(data_dir)
    if ("synthetic" in cfg or "data" in cfg) and config_hash(resolve_dataset(cfg)) != manifest["config_hash"]:
        raise ConfigError("the config's dataset section does not match the dataset manifest")
    cutoffs = tuple(cfg.get("cutoffs", (5, 10)))
    resolved = {"train": dataclasses.asdict(tc), "seeds": seeds, "methods": methods,
                "cutoffs": list(cutoffs), "dataset_hash": manifest["config_hash"]}
    h = config_hash(resolved)
    out = _prepare_out(Path(args.out), args.force)
    rows, runs = [], {}
    for method in methods:
        for seed in seeds:
            run_cfg = dataclasses.replace(tc, seed=seed)
            split = split_validation(table, run_cfg.val_fraction, seed, run_cfg.negative_rate)
            run_dir = out / method / f"seed{seed}"
            run_dir.mkdir(parents=True)
            logger.info("training %s seed %d", method, seed)
            stack = train_method(method, table, split, run_cfg)
            files = _save_stack(stack, run_dir)
            with (run_dir / "history.jsonl").open("w") as fh:
                for rec in stack.history:
                    fh.write(json.dumps({"config_hash": h, "seed": seed, **rec}, sort_keys=True,
                                        default=_json_default) + "\n")
            report = evaluate(test.users, stack.theta.score(test.users, test.items), test.ratings, cutoffs)
            _dump_json(run_dir / "metrics.json", {"config_hash": h, "seed": seed, "method": method,
                                                  **report.to_dict()})
            rows.append(_metric_row(method, seed, report, h))
            runs[f"{method}/seed{seed}"] = {"method": method, "seed": seed, "files": files}
    _write_csv(out / "per_seed.csv", rows)
    _write_csv(out / "summary.csv", summarize(rows, h))
    paired = paired_table(rows)
    if paired:
        _write_csv(out / "paired.csv", paired, f"config_hash={h}")
    _dump_json(out / "manifest.json", {
        "command": "train", "config_hash": h, "config": resolved, "seeds": seeds,
        "data_dir": str(data_dir.resolve()), "runs": runs,
    })
    return EXIT_OK


def _run_dirs(run_root: Path):
    manifest = _read_manifest(run_root)
    if manifest.get("command") != "train":
        raise DataError(f"{run_root} is not a training run directory")
    for key, info in manifest["runs"].items():
        yield manifest, info, run_root / key


def _load_run(run_dir: Path, info: dict):
    missing = [f for f in info["files"].values() if not (run_dir / f).exists()]
    if missing:
        raise DataError(f"missing checkpoint(s) in {run_dir}: {missing}")
    f = info["files"]
    return {
        "theta": load_model(run_dir / f["theta"]),
        "phi": load_model(run_dir / f["phi"]) if "phi" in f else None,
        "psi": load_model(run_dir / f["psi"]) if "psi" in f else None,
        "prop_bank": load_bank(run_dir / f["prop_bank"]) if "prop_bank" in f else None,
        "imp_bank": load_bank(run_dir / f["imp_bank"]) if "imp_bank" in f else None,
    }


def cmd_eval(args) -> int:
    root = Path(args.run)
    rows = []
    h = None
    for manifest, info, run_dir in _run_dirs(root):
        h = manifest["config_hash"]
        data_dir = Path(args.data or manifest["data_dir"])
        test = load_table(data_dir / "test.npz")
        models = _load_run(run_dir, info)
        cutoffs = tuple(manifest["config"]["cutoffs"])
        report = evaluate(test.users, models["theta"].score(test.users, test.items), test.ratings, cutoffs)
        _dump_json(run_dir / "eval.json", {"config_hash": h, "seed": info["seed"], "method": info["method"],
                                           **report.to_dict()})
        rows.append(_metric_row(info["method"], info["seed"], report, h))
    _write_csv(root / "eval_per_seed.csv", rows)
    _write_csv(root / "eval_summary.csv", summarize(rows, h))
    return EXIT_OK


def _random_audit(n_instances, max_pairs, seed, kind="bce"):
    rng = np.random.default_rng(seed)
    violations = {}
    worst = {}
    for _ in range(n_instances):
        n = int(rng.integers(1, max_pairs + 1))
        e0, e1 = error_pair(kind, rng.uniform(0.02, 0.98, n))
        audit = calibration_bound_audit(e0, e1, rng.random(n), rng.uniform(0.02, 1, n), rng.uniform(0.02, 1, n), rng.random(n))
        for k, ok in audit.holds.items():
            violations[k] = violations.get(k, 0) + (not ok)
            worst[k] = min(worst.get(k, np.inf), audit.slack[k])
    return {"n_instances": n_instances, "max_pairs": max_pairs, "seed": seed,
            "violations": violations, "min_slack": worst, "total_violations": int(sum(violations.values()))}


def _oracle_check(e, e_hat, p, p_hat):
    mean, var = brute_force_moments(e, e_hat, p, p_hat)
    bias, cvar = dr_bias(e, e_hat, p, p_hat), dr_variance(e, e_hat, p, p_hat)
    return {"n_pairs": int(len(e)), "enumerated_bias": abs(mean - ideal_loss(e)), "dr_bias": bias,
            "enumerated_variance": var, "dr_variance": cvar,
            "bias_delta": abs(abs(mean - ideal_loss(e)) - bias), "variance_delta": abs(var - cvar)}


def _stack_audit(models, gt, kind, oracle_pairs, rng):
    theta, phi, psi = models["theta"], models["phi"], models["psi"]
    e0, e1 = error_pair(kind, theta.score_grid())
    raw = calibration_bound_audit(e0, e1, phi.score_grid(), gt.p, psi.score_grid(), gt.q)
    out = {"raw": raw.to_dict()}
    r_bar = bank_score_grid(models["imp_bank"], phi) if models["imp_bank"] is not None else phi.score_grid()
    p_bar = bank_score_grid(models["prop_bank"], psi) if models["prop_bank"] is not None else psi.score_grid()
    if models["imp_bank"] is not None or models["prop_bank"] is not None:
        out["calibrated"] = calibration_bound_audit(e0, e1, r_bar, gt.p, p_bar, gt.q).to_dict()
    pick = rng.choice(e0.size, size=min(oracle_pairs, e0.size), replace=False)
    q, rt = gt.q.ravel()[pick], r_bar.ravel()[pick]
    a0, a1 = e0.ravel()[pick], e1.ravel()[pick]
    out["oracle"] = _oracle_check(q * a1 + (1 - q) * a0, rt * a1 + (1 - rt) * a0, gt.p.ravel()[pick], p_bar.ravel()[pick])
    return out


def cmd_audit(args) -> int:
    cfg = load_config(args.config, args.set)
    opts = {**AUDIT_DEFAULTS, **(cfg.get("audit") or {})}
    extra = set(opts) - set(AUDIT_DEFAULTS)
    if extra:
        raise ConfigError(f"unknown 'audit' keys: {sorted(extra)}")
    if int(opts["oracle_pairs"]) > 16:
        raise ConfigError("oracle_pairs is limited to 16")
    seed = int(cfg.get("seed", 0))
    if args.run:
        run_manifest = _read_manifest(Path(args.run))
        data_dir = Path(args.data or run_manifest.get("data_dir", ""))
    elif args.data:
        data_dir = Path(args.data)
    else:
        raise ConfigError("audit needs --run or --data")
    data_manifest = _read_manifest(data_dir)
    if not (data_dir / "ground_truth.npz").exists():
        logger.error("refusing to audit: %s has no ground-truth propensities and ratings", data_dir)
        return EXIT_DATA
    gt = GroundTruth.load(data_dir / "ground_truth.npz")
    h = config_hash({"audit": opts, "seed": seed, "dataset_hash": data_manifest["config_hash"],
                     "run": run_manifest["config_hash"] if args.run else None})
    rng = np.random.default_rng(seed)
    payload = {"config_hash": h, "seed": seed, "random": _random_audit(int(opts["n_random"]), int(opts["max_pairs"]), seed)}
    # standalone oracle instance, independent of any trained model
    n = int(opts["oracle_pairs"])
    payload["oracle"] = _oracle_check(rng.uniform(0, 2, n), rng.uniform(0, 2, n), rng.uniform(0.05, 1, n),
                                      rng.uniform(0.05, 1, n))
    stacks = {}
    if args.run:
        kind = run_manifest["config"]["train"]["error_kind"]
        for _, info, run_dir in _run_dirs(Path(args.run)):
            models = _load_run(run_dir, info)
            if models["phi"] is None or models["psi"] is None:
                continue
            gt.check_table(load_table(data_dir / "table.npz"))
            stacks[f"{info['method']}/seed{info['seed']}"] = _stack_audit(models, gt, kind, n, rng)
    payload["stacks"] = stacks
    out = Path(args.out) if args.out else Path(args.run or data_dir)
    out.mkdir(parents=True, exist_ok=True)
    _dump_json(out / "audit.json", payload)
    bad = payload["random"]["total_violations"]
    logger.info("randomized audit: %d violations over %d instances", bad, opts["n_random"])
    return EXIT_OK


def _report(scores, labels, n_bins, meta):
    rep = ece_binned(scores, labels, n_bins)
    rep.meta = meta
    return rep


def cmd_calib_report(args) -> int:
    cfg = load_config(args.config, args.set)
    opts = {**CALIB_DEFAULTS, **(cfg.get("calib") or {})}
    n_bins = int(opts["n_bins"])
    root = Path(args.run)
    out_root = Path(args.out) if args.out else root / "calibration"
    written = 0
    for manifest, info, run_dir in _run_dirs(root):
        h, seed = manifest["config_hash"], info["seed"]
        data_dir = Path(args.data or manifest["data_dir"])
        _, table, test, gt = _load_dataset(data_dir)
        models = _load_run(run_dir, info)
        meta = {"config_hash": h, "seed": seed, "method": info["method"], "n_bins": n_bins}
        reports = {}
        o = table.mask().ravel().astype(np.float64)
        heur = heuristic_propensity(table)
        reports["propensity_heuristic"] = (heur.ravel(), o, heur)
        if models["psi"] is not None:
            grid = models["psi"].score_grid()
            reports["propensity_before"] = (grid.ravel(), o, grid)
            if models["prop_bank"] is not None:
                cal = bank_score_grid(models["prop_bank"], models["psi"])
                reports["propensity_after"] = (cal.ravel(), o, cal)
        if models["phi"] is not None:
            raw = models["phi"].score(test.users, test.items)
            reports["imputation_before"] = (raw, test.ratings, None)
            if models["imp_bank"] is not None:
                cal = bank_scores(models["imp_bank"], models["phi"], test.users, test.items)
                reports["imputation_after"] = (cal, test.ratings, None)
        dest = out_root / info["method"] / f"seed{seed}"
        dest.mkdir(parents=True, exist_ok=True)
        for name, (scores, labels, grid) in reports.items():
            m = dict(meta, report=name)
            if grid is not None and gt is not None:
                m["ece_pairwise"] = ece_pairwise(gt.p, grid)
            rep = _report(scores, labels, n_bins, m)
            (dest / f"{name}.json").write_text(rep.to_json() + "\n")
            (dest / f"{name}.csv").write_text(f"# config_hash={h} seed={seed} report={name}\n" + rep.to_csv())
            written += 1
    logger.info("wrote %d reliability reports under %s", written, out_root)
    return EXIT_OK


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dcelab", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="YAML config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key, e.g. train.epochs=5")
        sp.add_argument("--out", required=out_required, help="output directory")

    g = sub.add_parser("gen-data", help="generate or ingest a dataset")
    common(g)
    g.add_argument("--seed", type=int)
    g.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one or more methods over seeds")
    common(t)
    t.add_argument("--data", required=True, help="dataset directory from gen-data")
    t.add_argument("--seeds", help="comma-separated seeds, overrides the config")
    t.add_argument("--method", choices=METHODS)
    t.add_argument("--force", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="re-evaluate saved checkpoints on the test set")
    e.add_argument("--run", required=True)
    e.add_argument("--data", help="dataset directory (default: the one recorded by train)")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("audit", help="bias/variance bounds against ground truth")
    common(a, out_required=False)
    a.add_argument("--run", help="training run directory")
    a.add_argument("--data", help="dataset directory")
    a.set_defaults(func=cmd_audit)

    c = sub.add_parser("calib-report", help="reliability reports before and after calibration")
    common(c, out_required=False)
    c.add_argument("--run", required=True)
    c.add_argument("--data")
    c.set_defaults(func=cmd_calib_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"dcelab: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"dcelab: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, FileNotFoundError, KeyError) as exc:
        print(f"dcelab: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
