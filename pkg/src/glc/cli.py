"""Experiment command line.

Subcommands:

* ``prepare``  corrupt a dataset once and materialize it to disk;
* ``train``    pretrain + train + evaluate a single configuration;
* ``sweep``    Cartesian product of settings x rates (x ablations);
* ``ablate``   the three objective variants on identical data and seeds.

Configuration comes from built-in defaults, overlaid by a JSON config file
(``--config``, flat keys), overlaid by explicit flags.  The fully resolved
configuration is echoed into every report.  Per-cell seeds derive from
SHA-256 of (master seed, setting, rate), so adding cells never reshuffles
existing ones and any cell can be reproduced in isolation.

``GLC_THREADS`` caps how many sweep cells run in parallel (default 1,
serial).  Exit codes: 0 success, 1 configuration error, 2 I/O error,
3 numerical abort during training.
"""

import argparse
import hashlib
import json
import logging
import os
import shutil
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .data import (MANIFEST_NAME, MultiViewDataset, apply_combined,
                   derive_seed, generate_missing_mask, inject_noise,
                   load_dataset, make_synthetic, save_dataset)
from .errors import ConfigError, DataFormatError, GlcError, NumericError
from .model import save_checkpoint
from .pipeline import (TrainConfig, TrainHistory, evaluate, build_model,
                       pretrain, train)

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
SETTINGS = ("clean", "incomplete", "noise", "combined")
ABLATIONS = ("rec", "rec+ggc", "full")

DEFAULTS = {
    "dataset": None,
    "setting": "clean",
    "rate": 0.0,
    "rates": None,
    "settings": None,
    "noise_std": 0.4,
    "alpha": 0.1,
    "beta": 1.0,
    "tau": 0.5,
    "pos": 1.0,
    "neg": 50.0,
    "sigma": "median",
    "lr": 1e-3,
    "batch": 256,
    "profile": "paper",
    "hidden": None,
    "latent_dim": None,
    "head_dim": None,
    "pretrain_epochs": None,
    "epochs": None,
    "seed": 0,
    "out": "runs/out",
    "ablation": "full",
    "ablations": None,
    "include_positive_in_denominator": False,
    "normalize_weights": False,
    "eval_every": 0,
    "kmeans_restarts": 10,
    "eval_seeds": 5,
    "fuse_space": "contrast",
    "eval_protocol": "kmeans",   # or "retrain": retrain per evaluation seed
    "synthetic": None,           # dict form of a synthetic dataset spec
}


class _Parser(argparse.ArgumentParser):
    """argparse that reports bad usage as a configuration error (exit 1)."""

    def error(self, message):
        raise ConfigError(message)


def build_parser():
    parser = _Parser(prog="glc", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file with flat keys")
        p.add_argument("--dataset", help="dataset directory or synthetic:k=v,... spec")
        p.add_argument("--setting", choices=SETTINGS)
        p.add_argument("--rate", type=float)
        p.add_argument("--noise-std", dest="noise_std", type=float)
        p.add_argument("--seed", type=int)
        p.add_argument("--out")

    def training(p):
        p.add_argument("--alpha", type=float)
        p.add_argument("--beta", type=float)
        p.add_argument("--tau", type=float)
        p.add_argument("--pos", type=float)
        p.add_argument("--neg", type=float)
        p.add_argument("--batch", type=int)
        p.add_argument("--profile", choices=sorted(PROFILE_NAMES))

    p = sub.add_parser("prepare", help="materialize a corrupted dataset")
    common(p)

    p = sub.add_parser("train", help="train and evaluate one configuration")
    common(p)
    training(p)

    p = sub.add_parser("sweep", help="grid of settings x rates")
    common(p)
    training(p)
    p.add_argument("--rates", help="comma-separated rate list")

    p = sub.add_parser("ablate", help="objective ablation rows")
    common(p)
    training(p)
    return parser


PROFILE_NAMES = ("paper", "desk")


def load_config(args):
    """defaults <- config file <- explicit flags."""
    cfg = dict(DEFAULTS)
    path = getattr(args, "config", None)
    if path:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError:
            raise
        try:
            overlay = json.loads(text)
        except json.JSONDecodeError as err:
            raise ConfigError(f"{path}: {err}") from err
        unknown = set(overlay) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(overlay)
    for key in ("dataset", "setting", "rate", "noise_std", "seed", "out",
                "alpha", "beta", "tau", "pos", "neg", "batch", "profile"):
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    rates = getattr(args, "rates", None)
    if rates is not None:
        cfg["rates"] = [float(r) for r in str(rates).split(",") if r != ""]
    if cfg["setting"] not in SETTINGS:
        raise ConfigError(f"unknown setting {cfg['setting']!r}")
    if cfg["ablation"] not in ABLATIONS:
        raise ConfigError(f"unknown ablation {cfg['ablation']!r}")
    if cfg["eval_protocol"] not in ("kmeans", "retrain"):
        raise ConfigError("eval_protocol must be 'kmeans' or 'retrain'")
    if not 0.0 <= float(cfg["rate"]) <= 1.0:
        raise ConfigError("rate must lie in [0, 1]")
    if cfg["dataset"] is None and cfg["synthetic"] is None:
        raise ConfigError("a dataset (path or synthetic spec) is required")
    return cfg


# ---------------------------------------------------------------------------
# dataset resolution
# ---------------------------------------------------------------------------

def parse_synthetic_spec(text):
    """Parse ``synthetic:n=300,v=3,k=3,dims=12|10|8,sep=2.0,noise=1.0``."""
    body = text.split(":", 1)[1] if ":" in text else ""
    spec = {}
    for item in filter(None, body.split(",")):
        if "=" not in item:
            raise ConfigError(f"bad synthetic spec item {item!r}")
        key, value = item.split("=", 1)
        spec[key.strip()] = value.strip()
    out = {}
    try:
        out["n_samples"] = int(spec.pop("n", 300))
        out["n_views"] = int(spec.pop("v", 2))
        out["n_classes"] = int(spec.pop("k", 3))
        if "dims" in spec:
            out["dims"] = [int(d) for d in spec.pop("dims").split("|")]
        out["separation"] = float(spec.pop("sep", 5.0))
        if "noise" in spec:
            out["view_noise"] = float(spec.pop("noise"))
        if "seed" in spec:
            out["seed"] = int(spec.pop("seed"))
    except ValueError as err:
        raise ConfigError(f"bad synthetic spec: {err}") from err
    if spec:
        raise ConfigError(f"unknown synthetic spec keys: {sorted(spec)}")
    return out


def resolve_dataset(cfg, master_seed):
    """Load a dataset directory or generate the configured synthetic one."""
    source = cfg["dataset"]
    if source is not None and not str(source).startswith("synthetic:"):
        return load_dataset(source), str(source)
    spec = dict(cfg["synthetic"] or {})
    if source is not None:
        spec.update(parse_synthetic_spec(str(source)))
    spec.setdefault("seed", derive_seed(master_seed, "synthetic"))
    dataset = make_synthetic(**spec)
    label = "synthetic:" + ",".join(f"{k}={spec[k]}" for k in sorted(spec))
    return dataset, label


def corrupt_dataset(dataset, setting, rate, noise_std, seed):
    """Apply one evaluation protocol; ``clean`` (or rate 0) is the identity."""
    if setting == "clean" or rate == 0.0:
        return dataset
    protocol_seed = derive_seed(seed, "protocol", setting, f"{rate:.6f}")
    if setting == "incomplete":
        mask = generate_missing_mask(dataset.n_samples, dataset.n_views, rate,
                                     protocol_seed)
        return MultiViewDataset([v.copy() for v in dataset.views], mask,
                                dataset.labels, dataset.noise_flags,
                                dataset.n_classes)
    if setting == "noise":
        return inject_noise(dataset, rate, noise_std, protocol_seed)
    if setting == "combined":
        return apply_combined(dataset, rate, noise_std, protocol_seed)
    raise ConfigError(f"unknown setting {setting!r}")


# ---------------------------------------------------------------------------
# single run
# ---------------------------------------------------------------------------

def make_train_config(cfg, setting, rate, ablation):
    alpha = cfg["alpha"] if ablation in ("rec+ggc", "full") else 0.0
    beta = cfg["beta"] if ablation == "full" else 0.0
    # the trainer seed is shared across ablation rows so they see identical
    # batches; it still separates settings and rates
    seed = derive_seed(cfg["seed"], "trainer", setting, f"{rate:.6f}")
    return TrainConfig(
        alpha=alpha, beta=beta, temperature=cfg["tau"],
        pos_percent=cfg["pos"], neg_percent=cfg["neg"], sigma=cfg["sigma"],
        learning_rate=cfg["lr"], batch_size=cfg["batch"],
        profile=cfg["profile"], hidden=cfg["hidden"],
        latent_dim=cfg["latent_dim"], head_dim=cfg["head_dim"],
        pretrain_epochs=cfg["pretrain_epochs"], epochs=cfg["epochs"],
        seed=seed,
        include_positive_in_denominator=cfg["include_positive_in_denominator"],
        normalize_weights=cfg["normalize_weights"],
        eval_every=cfg["eval_every"], kmeans_restarts=cfg["kmeans_restarts"],
        eval_seeds=cfg["eval_seeds"], fuse_space=cfg["fuse_space"])


def resolved_cell_config(cfg, setting, rate, ablation):
    cell = {k: v for k, v in cfg.items()
            if k not in ("rates", "settings", "ablations")}
    cell.update(setting=setting, rate=rate, ablation=ablation)
    return cell


def config_hash(cell_cfg):
    """Short reproducibility key over everything that shapes the results.

    The output directory is excluded on purpose: re-running a cell into a
    different location must yield the same hash (and the same numbers).
    """
    hashed = {k: v for k, v in cell_cfg.items() if k != "out"}
    text = json.dumps(hashed, sort_keys=True, default=str)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def run_cell(cfg, setting, rate, ablation, out_dir=None):
    """Prepare data in memory, train, evaluate; optionally write artifacts."""
    started = time.perf_counter()
    base, source = resolve_dataset(cfg, cfg["seed"])
    dataset = corrupt_dataset(base, setting, rate, cfg["noise_std"],
                              cfg["seed"])
    tcfg = make_train_config(cfg, setting, rate, ablation)

    if cfg["eval_protocol"] == "retrain":
        reports, history, model = [], None, None
        for i in range(cfg["eval_seeds"]):
            run_tcfg = tcfg.resolved()
            run_tcfg.seed = derive_seed(tcfg.seed, "retrain", i)
            model, history = _fit(run_tcfg, dataset)
            reports.append(evaluate(model, dataset, run_tcfg,
                                    seeds=[derive_seed(run_tcfg.seed, "eval", 0)]))
        report = reports[0]
        for extra in reports[1:]:
            report.seeds += extra.seeds
            report.accs += extra.accs
            report.nmis += extra.nmis
            report.aris += extra.aris
    else:
        model, history = _fit(tcfg, dataset)
        report = evaluate(model, dataset, tcfg)

    cell_cfg = resolved_cell_config(cfg, setting, rate, ablation)
    train_recs = history.train_records()
    result = {
        "schema_version": SCHEMA_VERSION,
        "config": cell_cfg,
        "config_hash": config_hash(cell_cfg),
        "dataset": {"source": source, "n_samples": dataset.n_samples,
                    "n_views": dataset.n_views,
                    "n_classes": dataset.n_classes},
        "results": report.to_dict(),
        "final_loss": {
            "rec": train_recs[-1].rec if train_recs else None,
            "ggc": train_recs[-1].ggc if train_recs else None,
            "lwc": train_recs[-1].lwc if train_recs else None,
            "total": train_recs[-1].total if train_recs else None,
        },
        "wall_time_s": time.perf_counter() - started,
    }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        history.write_csv(out / "history.csv")
        save_checkpoint(model, out / "checkpoint.npz")
        result["artifacts"] = {"history_csv": "history.csv",
                               "checkpoint": "checkpoint.npz"}
        _write_json(out / "report.json", result)
    return result


def _fit(tcfg, dataset):
    model = build_model(dataset, tcfg)
    history = TrainHistory()
    pretrain(model, dataset, tcfg, history=history)
    model, history = train(model, dataset, tcfg, history=history)
    return model, history


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_prepare(cfg):
    out = Path(cfg["out"])
    setting, rate = cfg["setting"], float(cfg["rate"])
    source = cfg["dataset"]
    synthetic = source is None or str(source).startswith("synthetic:")

    if setting == "clean" and not synthetic:
        src = Path(source)
        manifest_path = src / MANIFEST_NAME
        if not manifest_path.is_file():
            raise DataFormatError(f"missing {manifest_path}")
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        out.mkdir(parents=True, exist_ok=True)
        for name in list(manifest.get("views", [])) + (
                [manifest["labels"]] if manifest.get("labels") else []):
            shutil.copyfile(src / name, out / name)
        dataset = load_dataset(source, standardize=False)
        with open(out / "mask.csv", "w", encoding="utf-8", newline="\n") as fh:
            for row in np.ones((dataset.n_samples, dataset.n_views), dtype=int):
                fh.write(",".join(str(v) for v in row) + "\n")
        manifest["mask"] = "mask.csv"
        (out / MANIFEST_NAME).write_text(
            json.dumps(manifest, indent=2, sort_keys=True) + "\n",
            encoding="utf-8")
        print(f"prepared clean copy at {out}")
        return 0

    base, _ = resolve_dataset(cfg, cfg["seed"])
    dataset = corrupt_dataset(base, setting, rate, cfg["noise_std"],
                              cfg["seed"])
    save_dataset(dataset, out)
    print(f"prepared setting={setting} rate={rate} at {out}")
    return 0


def cmd_train(cfg):
    out = Path(cfg["out"])
    result = run_cell(cfg, cfg["setting"], float(cfg["rate"]),
                      cfg["ablation"], out_dir=out)
    res = result["results"]
    print(json.dumps(result["config"], sort_keys=True))
    print(f"ACC {res['acc_mean']:.4f}+-{res['acc_std']:.4f}  "
          f"NMI {res['nmi_mean']:.4f}+-{res['nmi_std']:.4f}  "
          f"ARI {res['ari_mean']:.4f}+-{res['ari_std']:.4f}")
    return 0


def _cell_worker(payload):
    """Run one cell; failures are recorded, not raised (other cells go on)."""
    cfg, setting, rate, ablation, out_dir = payload
    try:
        return run_cell(cfg, setting, rate, ablation, out_dir=out_dir)
    except (GlcError, OSError) as err:
        code = 1 if isinstance(err, ConfigError) else (
            2 if isinstance(err, (OSError, DataFormatError)) else 3)
        logger.error("cell (%s, %s, %s) failed: %s", setting, rate, ablation, err)
        return {"schema_version": SCHEMA_VERSION,
                "config": resolved_cell_config(cfg, setting, rate, ablation),
                "error": {"type": type(err).__name__, "message": str(err),
                          "exit_code": code}}


def _run_cells(cfg, cells, out_root):
    """Run (setting, rate, ablation) cells, honoring GLC_THREADS.

    Returns the per-cell result dicts plus the overall exit code (0 when
    every cell succeeded, otherwise the largest per-cell code).
    """
    jobs = []
    for setting, rate, ablation in cells:
        sub = out_root / "cells" / f"{setting}_{rate:g}_{ablation}"
        jobs.append((cfg, setting, rate, ablation, str(sub)))
    workers = int(os.environ.get("GLC_THREADS", "1"))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            results = list(pool.map(_cell_worker, jobs))
    else:
        results = [_cell_worker(job) for job in jobs]
    code = max((r["error"]["exit_code"] for r in results if "error" in r),
               default=0)
    return results, code


def cmd_sweep(cfg):
    out = Path(cfg["out"])
    settings = cfg["settings"] or [cfg["setting"]]
    for s in settings:
        if s not in SETTINGS:
            raise ConfigError(f"unknown setting {s!r}")
    rates = cfg["rates"] if cfg["rates"] is not None else [float(cfg["rate"])]
    ablations = cfg["ablations"] or [cfg["ablation"]]
    for a in ablations:
        if a not in ABLATIONS:
            raise ConfigError(f"unknown ablation {a!r}")
    cells = [(s, float(r), a) for s in settings for r in rates
             for a in ablations]
    results, code = _run_cells(cfg, cells, out)

    rows = []
    for (setting, rate, ablation), result in zip(cells, results):
        row = {"setting": setting, "rate": rate, "ablation": ablation,
               "config_hash": result.get("config_hash", "")}
        if "error" in result:
            row.update({k: "" for k in ("acc_mean", "acc_std", "nmi_mean",
                                        "nmi_std", "ari_mean", "ari_std")})
            row["error"] = result["error"]["type"]
        else:
            res = result["results"]
            row.update({k: res[k] for k in ("acc_mean", "acc_std", "nmi_mean",
                                            "nmi_std", "ari_mean", "ari_std")})
            row["error"] = ""
        rows.append(row)
    rows.sort(key=lambda r: (r["setting"], r["rate"], r["ablation"]))
    out.mkdir(parents=True, exist_ok=True)
    header = ["setting", "rate", "ablation", "acc_mean", "acc_std",
              "nmi_mean", "nmi_std", "ari_mean", "ari_std", "config_hash",
              "error"]
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(str(row[k]) for k in header))
    (out / "sweep.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    _write_json(out / "sweep.json", {
        "schema_version": SCHEMA_VERSION,
        "master_seed": cfg["seed"],
        "cells": results,
    })
    for row in rows:
        if row["error"]:
            print(f"{row['setting']:>10} rate={row['rate']:<4g} "
                  f"{row['ablation']:<7} ERROR {row['error']}")
        else:
            print(f"{row['setting']:>10} rate={row['rate']:<4g} "
                  f"{row['ablation']:<7} ACC {row['acc_mean']:.4f}  "
                  f"NMI {row['nmi_mean']:.4f}")
    return code


def cmd_ablate(cfg):
    out = Path(cfg["out"])
    settings = cfg["settings"] or ["incomplete", "noise", "combined"]
    rate = float(cfg["rate"])
    cells = [(s, rate, a) for s in settings for a in ABLATIONS]
    results, code = _run_cells(cfg, cells, out)
    by_key = {(s, a): r for (s, _, a), r in zip(cells, results)}

    out.mkdir(parents=True, exist_ok=True)
    header = ["ablation"]
    for s in settings:
        header += [f"acc_{s}", f"nmi_{s}"]
    lines = [",".join(header)]
    for a in ABLATIONS:
        row = [a]
        for s in settings:
            result = by_key[(s, a)]
            if "error" in result:
                row += ["", ""]
            else:
                res = result["results"]
                row += [str(res["acc_mean"]), str(res["nmi_mean"])]
        lines.append(",".join(row))
    (out / "ablate.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    _write_json(out / "ablate.json", {
        "schema_version": SCHEMA_VERSION,
        "master_seed": cfg["seed"],
        "rate": rate,
        "cells": results,
    })
    print("\n".join(lines))
    return code


# ---------------------------------------------------------------------------
# entry
# ---------------------------------------------------------------------------

def main(argv=None):
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = load_config(args)
        command = {"prepare": cmd_prepare, "train": cmd_train,
                   "sweep": cmd_sweep, "ablate": cmd_ablate}[args.command]
        return command(cfg)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 1
    except (OSError, DataFormatError) as err:
        print(f"i/o error: {err}", file=sys.stderr)
        return 2
    except NumericError as err:
        print(f"numerical abort: {err}", file=sys.stderr)
        return 3
    except GlcError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
