"""Experiment runner: flamefl {run, verify-oracle, sweep, inspect}."""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import logging
import os
import sys
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .attacks import AttackConfig, AttackKind, apply_attack
from .baselines import ditto_run
from .datasets import linreg_federated, load_idx, synth_classification, synth_linreg
from .engine import Engine, HyperParams, feasibility_for
from .metrics import Diagnostics, evaluate
from .models import make_model
from .oracle import (fairness_variances, make_world, monte_carlo, attack_losses, shrinkage_check,
                     spread_variance_deriv)
from .partition import federate

log = logging.getLogger("flamefl")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2
OUT_ENV = "FLAMEFL_OUTPUT_DIR"

CSV_COLUMNS = ["run_id", "mode", "seed", "round", "client", "model", "loss", "acc", "benign",
               "loss_var", "lyapunov", "descent_gap", "relerr_gap", "mean_sq_grad"]

_num = {"type": "number"}
_int = {"type": "integer"}


def _obj(props, required=()):
    return {"type": "object", "properties": props, "required": list(required), "additionalProperties": False}


HPARAM_SCHEMA = _obj({
    "lam": {"type": "number", "exclusiveMinimum": 0}, "rho": {"type": "number", "exclusiveMinimum": 0},
    "eta": {"type": "number", "exclusiveMinimum": 0}, "H": {"type": "integer", "minimum": 1},
    "T": {"type": "integer", "minimum": 0}, "s": {"type": ["integer", "null"], "minimum": 1},
    "v": {"oneOf": [{"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                    {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1}}]},
    "eps0": {"type": "number", "minimum": 0}, "batch_size": {"type": ["integer", "null"], "minimum": 1},
    "alpha_scheme": {"enum": ["uniform", "proportional"]},
    "mode": {"enum": ["flame", "pfedme", "fedadmm", "fedavg", "lp_proj2"]},
    "d_sub": {"type": ["integer", "null"], "minimum": 1}, "proj_seed": _int,
    "L_estimate": {"type": ["number", "null"]}, "weighted_agg": {"type": "boolean"},
    "aggregator": {"enum": ["mean", "multi_krum"]},
    "krum_f": {"type": ["integer", "null"], "minimum": 0}, "krum_k": {"type": ["integer", "null"], "minimum": 1},
})

DATASET_SCHEMA = {"oneOf": [
    _obj({"kind": {"const": "synth_linreg"}, "m": {"type": "integer", "minimum": 1}, "N": {"type": "integer", "minimum": 1},
          "d": {"type": "integer", "minimum": 1}, "b": {"type": "number", "exclusiveMinimum": 0},
          "sigma": {"type": "number", "minimum": 0},
          "theta_gen": _obj({"kind": {"enum": ["gaussian", "equal_norm", "fixed"]}, "scale": _num, "norm": _num,
                             "mean": {"type": ["number", "array"]}, "values": {"type": "array"}}, ["kind"])},
         ["kind", "m", "N", "d", "b", "sigma"]),
    _obj({"kind": {"const": "synth_classification"}, "m": {"type": "integer", "minimum": 1},
          "n": {"type": "integer", "minimum": 1}, "d": {"type": "integer", "minimum": 1},
          "C": {"type": "integer", "minimum": 2}, "separation": {"type": "number", "minimum": 0},
          "noise": {"type": "number", "exclusiveMinimum": 0}},
         ["kind", "m", "n", "d", "C", "separation"]),
    _obj({"kind": {"const": "idx"}, "images": {"type": "string"}, "labels": {"type": "string"},
          "m": {"type": "integer", "minimum": 1}, "subset": {"type": "integer", "minimum": 1}},
         ["kind", "images", "labels", "m"]),
]}

PARTITION_SCHEMA = _obj({
    "scheme": {"enum": ["iid", "quantity_label", "dirichlet_label", "quality", "quantity_skew", "hybrid"]},
    "q": {"type": "integer", "minimum": 1}, "beta": {"type": "number", "exclusiveMinimum": 0},
    "sigma": {"type": "number", "minimum": 0},
}, ["scheme"])

ATTACK_SCHEMA = _obj({
    "kind": {"enum": [k.value for k in AttackKind]}, "gamma": {"type": "number", "minimum": 0},
    "fraction": {"type": "number", "minimum": 0, "maximum": 1}, "poison_mode": {"enum": ["flip", "uniform"]},
}, ["kind", "fraction"])

ORACLE_SCHEMA = _obj({
    "m": {"type": "integer", "minimum": 2}, "N": {"type": "integer", "minimum": 1},
    "d": {"type": "integer", "minimum": 1}, "b": {"type": "number", "exclusiveMinimum": 0},
    "sigma": {"type": "number", "minimum": 0}, "lam": {"type": "number", "exclusiveMinimum": 0},
    "rho": {"type": "number", "exclusiveMinimum": 0}, "gamma": {"type": "number", "minimum": 0},
    "m_a": {"type": "array", "items": {"type": "integer", "minimum": 0}},
    "trials": {"type": "integer", "minimum": 2}, "seed": _int,
    "theta_scale": {"type": "number", "minimum": 0},
    "fairness_sets": {"type": "integer", "minimum": 1},
    "noise_denom": {"enum": ["bN", "bm"]},
}, ["m", "N", "d", "b", "sigma", "lam", "rho", "gamma"])

CONFIG_SCHEMA = _obj({
    "name": {"type": "string"},
    "dataset": DATASET_SCHEMA,
    "partition": PARTITION_SCHEMA,
    "model": _obj({"kind": {"enum": ["linreg", "logistic", "mlp"]},
                   "hidden": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 2, "maxItems": 2}},
                  ["kind"]),
    "algorithm": {"enum": ["engine", "ditto"]},
    "hparams": HPARAM_SCHEMA,
    "attack": ATTACK_SCHEMA,
    "seeds": {"type": "array", "items": _int, "minItems": 1},
    "output_dir": {"type": "string"},
    "eval_every": {"type": "integer", "minimum": 1},
    "override_feasibility": {"type": "boolean"},
    "diagnostics": {"type": "boolean"},
    "test_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
    "val_fraction": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
    "oracle": ORACLE_SCHEMA,
}, [])


class ConfigError(ValueError):
    pass


def load_config(path) -> dict:
    try:
        cfg = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    try:
        jsonschema.validate(cfg, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = ".".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{where}: {exc.message}") from exc
    ds = cfg.get("dataset")
    if ds and ds["kind"] == "idx":
        for key in ("images", "labels"):
            if not Path(ds[key]).exists():
                raise ConfigError(f"dataset.{key}: file not found: {ds[key]}")
    if "oracle" not in cfg:
        for key in ("dataset", "model", "hparams", "seeds"):
            if key not in cfg:
                raise ConfigError(f"{key}: required for a training run")
        if ds["kind"] != "synth_linreg" and "partition" not in cfg:
            raise ConfigError("partition: required for classification data")
        if ds["kind"] == "synth_linreg" and cfg["model"]["kind"] != "linreg":
            raise ConfigError("model.kind: regression data needs the linreg model")


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


# ------------------------------------------------------------------- building


def build_federated(cfg: dict, seed: int):
    ds = cfg["dataset"]
    if ds["kind"] == "synth_linreg":
        clients = synth_linreg(ds["m"], ds["N"], ds["d"], ds["b"], ds["sigma"],
                               ds.get("theta_gen", {"kind": "gaussian"}), seed)
        return linreg_federated(clients, seed)
    if ds["kind"] == "synth_classification":
        data = synth_classification(ds["m"], ds["n"], ds["d"], ds["C"], ds["separation"], seed,
                                    noise=ds.get("noise", 1.0))
    else:
        data = load_idx(ds["images"], ds["labels"])
        if ds.get("subset"):
            idx = np.sort(np.random.default_rng([seed, 5]).permutation(len(data))[: ds["subset"]])
            data = data.subset(idx)
    return federate(data, ds["m"], cfg["partition"], seed,
                    test_fraction=cfg.get("test_fraction", 0.2), val_fraction=cfg.get("val_fraction", 0.1))


def build_models(cfg: dict, fed):
    mk = cfg["model"]
    hidden = tuple(mk.get("hidden", (64, 32)))
    train, val, test = [], [], []
    for i in range(fed.m):
        for store, getter in ((train, fed.client_train), (val, fed.client_val), (test, fed.client_test)):
            X, y = getter(i)
            store.append(make_model(mk["kind"], X, y, fed.num_classes, hidden))
    return train, val, test


def _fmt(x):
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def run_seed(cfg: dict, seed: int, threads: int = 1):
    """One training run; returns (csv rows, final summary dict, train-loss curve)."""
    fed = build_federated(cfg, seed)
    train, val, test = build_models(cfg, fed)
    hp = HyperParams(**cfg["hparams"])
    attack = AttackConfig(**cfg["attack"]) if cfg.get("attack") else None
    setup = apply_attack(attack, train, seed)
    if hp.aggregator == "multi_krum" and hp.krum_f is None:
        hp.krum_f = len(setup.malicious)
    run_id = cfg.get("name", "run")
    every = cfg.get("eval_every", 1)
    rows, curve = [], []
    algo = cfg.get("algorithm", "engine")

    def emit(t, thetas, w, diag):
        res = evaluate(thetas, w, test, val, setup.benign)
        summ = res.summary()
        for tag in ("PM", "GM", "HM"):
            for i in range(fed.m):
                rows.append([run_id, hp.mode if algo == "engine" else algo, seed, t, i, tag, res.loss[tag][i],
                             res.acc[tag][i], bool(setup.benign[i]), "", "", "", "", ""])
            rows.append([run_id, hp.mode if algo == "engine" else algo, seed, t, -1, tag,
                         summ[f"{tag}_loss_mean"], summ[f"{tag}_acc_mean"], "",
                         summ[f"{tag}_loss_var"], diag.get("lyapunov", ""), diag.get("descent_gap", ""),
                         diag.get("relerr_gap", ""), diag.get("mean_sq_grad", "")])
        train_loss = float(np.mean([train[i].loss(thetas[i]) for i in range(fed.m)]))
        curve.append((t, train_loss))
        return summ

    final = {}
    if algo == "ditto":
        state = ditto_run(hp, setup.models, seed, upload_hook=setup.upload_hook)
        for t, w, personal in state.history:
            if t % every == 0 or t == hp.T:
                final = emit(t, list(personal), w, {})
        return rows, final, curve

    eng = Engine(hp, setup.models, seed, override=cfg.get("override_feasibility", False),
                 upload_hook=setup.upload_hook, threads=threads)
    diag = None
    if cfg.get("diagnostics", True) and hp.mode in ("flame", "lp_proj2"):
        rep = feasibility_for(hp, setup.models)
        diag = Diagnostics(hp.lam, hp.rho, rep.iota, rep.D1, rep.D2, eng.P)
    is_proj = hp.mode == "lp_proj2"

    def hook(server, clients):
        nonlocal final
        d = {}
        if diag is not None:
            diag(server, clients)
            d = diag.rows[-1]
        t = server.round
        if t % every == 0 or t == hp.T:
            final = emit(t, [c.theta for c in clients], None if is_proj else server.w, d)

    eng.run(hooks=[hook], history=False)
    if diag is not None:
        final = dict(final, final_lyapunov=diag.rows[-1]["lyapunov"],
                     min_descent_gap=float(np.nanmin(diag.column("descent_gap"))) if len(diag.rows) > 1 else None)
    final["malicious"] = setup.malicious
    return rows, final, curve


def write_csv(path, rows):
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(CSV_COLUMNS)
    for r in rows:
        wr.writerow([_fmt(x) for x in r])
    Path(path).write_text(buf.getvalue())


def _finite_or_none(row: dict) -> dict:
    # NaN is not valid JSON; regression runs have no accuracy, for instance
    return {k: (None if isinstance(v, float) and not np.isfinite(v) else v) for k, v in row.items()}


def summarize(per_seed: dict) -> dict:
    keys = [k for k, v in next(iter(per_seed.values())).items() if isinstance(v, (int, float))]
    out = {}
    for k in keys:
        vals = np.array([s[k] for s in per_seed.values() if s.get(k) is not None], dtype=float)
        if len(vals):
            out[k] = {"mean": float(np.mean(vals)), "std": float(np.std(vals))}
    return out


def _file_sha(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def run_experiment(cfg: dict, out_dir, threads=1, seed_override=None, extra_manifest=None) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seeds = [seed_override] if seed_override is not None else cfg["seeds"]
    chash = config_hash(cfg)
    per_seed, files, curves = {}, [], {}
    for seed in seeds:
        rows, final, curve = run_seed(cfg, seed, threads)
        name = f"{cfg.get('name', 'run')}_seed{seed}.csv"
        write_csv(out / name, rows)
        files.append(name)
        per_seed[seed] = _finite_or_none(final)
        curves[seed] = curve
    summary = {"config_hash": chash, "seeds": seeds, "per_seed": per_seed, "aggregate": summarize(per_seed)}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True, default=float))
    manifest = {"config_hash": chash, "code_version": __version__, "config": cfg, "seeds": seeds,
                "files": {f: _file_sha(out / f) for f in files + ["summary.json"]}}
    if extra_manifest:
        manifest.update(extra_manifest)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return {"summary": summary, "curves": curves}


# --------------------------------------------------------------- oracle check


def verify_oracle(cfg: dict) -> dict:
    """Monte Carlo against closed forms plus the loss and fairness comparisons."""
    oc = cfg["oracle"]
    trials = oc.get("trials", 10000)
    seed = oc.get("seed", 0)
    checks = []
    base = dict(m=oc["m"], N=oc["N"], d=oc["d"], b=oc["b"], sigma=oc["sigma"], lam=oc["lam"],
                rho=oc["rho"], gamma=oc["gamma"])
    for m_a in oc.get("m_a", [2, 5]):
        world = make_world(**base, m_a=m_a, seed=seed, theta_gen={"kind": "gaussian", "scale": oc.get("theta_scale", 1.0)},
                           noise_denom=oc.get("noise_denom", "bN"))
        for kind in (AttackKind.SAME_VALUE, AttackKind.SIGN_FLIP, AttackKind.GAUSSIAN):
            mc = monte_carlo(world, kind, trials, seed + 17 * m_a)
            gm, pm = attack_losses(world, kind)
            for tag, poly in (("GM", gm), ("PM", pm)):
                mean, se = mc[tag]
                closed = poly(world.q)
                checks.append({"check": f"monte_carlo/{kind.value}/m_a={m_a}/{tag}", "closed_form": closed,
                               "mc_mean": mean, "mc_se": se, "z": (mean - closed) / se if se > 0 else 0.0,
                               "pass": bool(abs(mean - closed) <= 3 * se)})
            sc = shrinkage_check(world, kind)
            for tag in ("GM", "PM"):
                r = sc[tag]
                ok = (not r["threshold_holds"]) or r["flame_not_worse"]
                checks.append({"check": f"threshold/{kind.value}/m_a={m_a}/{tag}", "q": sc["q"], **r, "pass": bool(ok)})
    for k in range(oc.get("fairness_sets", 20)):
        world = make_world(**base, seed=1000 + k, theta_gen={"kind": "equal_norm", "norm": 1.0})
        v1 = fairness_variances(world, 1.0)
        ok = all(fairness_variances(world, q)[j] <= v1[j] * (1 + 1e-12) for q in np.arange(1, 10) / 10 for j in (0, 1))
        der = spread_variance_deriv(world.thetas, 1.0)
        checks.append({"check": f"fairness/set={k}", "deriv_at_1": der, "pass": bool(ok and der >= -1e-12)})
    return {"all_pass": all(c["pass"] for c in checks), "checks": checks}


# ------------------------------------------------------------------------ CLI


AXES = {"lambda": "lam", "H": "H", "rho": "rho", "s": "s"}


def _out_dir(args, cfg):
    return args.out or os.environ.get(OUT_ENV) or cfg.get("output_dir") or "flamefl_out"


def cmd_run(args):
    cfg = load_config(args.config)
    res = run_experiment(cfg, _out_dir(args, cfg), args.threads, args.seed_override)
    print(json.dumps(res["summary"]["aggregate"], indent=2, sort_keys=True))
    return EXIT_OK


def cmd_verify(args):
    cfg = load_config(args.config)
    if "oracle" not in cfg:
        raise ConfigError("oracle: section required for verify-oracle")
    rep = verify_oracle(cfg)
    text = json.dumps(rep, indent=2, default=float)
    out = args.out or os.environ.get(OUT_ENV) or cfg.get("output_dir")
    if out:
        Path(out).mkdir(parents=True, exist_ok=True)
        (Path(out) / "oracle_report.json").write_text(text)
    print(text)
    return EXIT_OK if rep["all_pass"] else EXIT_RUNTIME


def cmd_sweep(args):
    cfg = load_config(args.config)
    key = AXES[args.axis]
    out = Path(_out_dir(args, cfg))
    lines = ["axis,value,seed,round,train_loss"]
    summaries = {}
    for raw in args.values:
        val = int(raw) if key in ("H", "s") else float(raw)
        sub = copy.deepcopy(cfg)
        sub["hparams"][key] = val
        validate_config(sub)
        res = run_experiment(sub, out / f"{args.axis}={raw}", args.threads, args.seed_override)
        summaries[raw] = res["summary"]["aggregate"]
        for seed, curve in res["curves"].items():
            lines += [f"{args.axis},{raw},{seed},{t},{loss!r}" for t, loss in curve]
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep_curves.csv").write_text("\n".join(lines) + "\n")
    (out / "sweep_summary.json").write_text(json.dumps(summaries, indent=2, sort_keys=True))
    print(json.dumps(summaries, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_inspect(args):
    if args.out:
        path = Path(args.out) / "manifest.json"
    elif args.config:
        cfg = load_config(args.config)
        path = Path(_out_dir(args, cfg)) / "manifest.json"
    else:
        raise ConfigError("inspect needs --out or --config")
    if not path.exists():
        raise ConfigError(f"no manifest at {path}")
    print(path.read_text())
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="flamefl", description=__doc__)
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp, need_config=True):
        sp.add_argument("--config", required=need_config, help="JSON experiment config")
        sp.add_argument("--out", help="output directory (overrides the config)")
        sp.add_argument("--threads", type=int, default=1, help="worker threads for client updates")
        sp.add_argument("--seed-override", type=int, default=None, help="run this single seed instead")

    common(sub.add_parser("run", help="train and write per-seed CSVs, summary and manifest"))
    common(sub.add_parser("verify-oracle", help="check the linear-regression closed forms"))
    sw = sub.add_parser("sweep", help="repeat a run over values of one hyperparameter")
    common(sw)
    sw.add_argument("--axis", choices=sorted(AXES), required=True)
    sw.add_argument("--values", nargs="+", required=True)
    common(sub.add_parser("inspect", help="print the manifest of an output directory"), need_config=False)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    handler = {"run": cmd_run, "verify-oracle": cmd_verify, "sweep": cmd_sweep, "inspect": cmd_inspect}[args.verb]
    try:
        return handler(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - any failure during compute maps to exit 1
        log.error("run failed: %s", exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
