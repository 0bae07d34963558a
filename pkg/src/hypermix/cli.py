"""Experiment runner: pretrain -> metatrain -> eval pipeline, grid sweeps,
and the covariance diagnostic, with deterministic seeded outputs.

Exit codes: 0 success, 2 configuration or usage error, 3 runtime/numeric
error. Every payload file embeds the seed and config hash; wall-clock
timestamps appear only in the manifest files.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from itertools import product
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import nets, plots
from .errors import ConfigError
from .evalkit import SCORE_METHODS, covariance_rank_diagnostic, evaluate
from .metatrain import metatrain
from .oodscore import default_odin_temperature
from .synthdata import OOD_TRUTH, STREAM_TRAIN, generate_dataset, rng_stream


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _stamp(cfg):
    return f"# seed={cfg['seed']} config_hash={cfgmod.config_hash(cfg)}"


def _write_manifest(out: Path, command: str, cfg: dict, outputs: list[str]):
    _write_json(out / f"manifest-{command}.json", {
        "command": command,
        "seed": cfg["seed"],
        "config_hash": cfgmod.config_hash(cfg),
        "config": {k: cfg[k] for k in sorted(cfg)},
        "outputs": sorted(outputs),
        "timestamp": time.time(),  # the one non-deterministic field
    })


def _load_cfg(args) -> dict:
    cfg = cfgmod.load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.out is not None:
        cfg["out"] = args.out
    if getattr(args, "methods", None) is not None:
        cfg["eval.methods"] = [m.strip() for m in args.methods.split(",") if m.strip()]
    if getattr(args, "shots", None) is not None:
        cfg["task.shots"] = args.shots
    if getattr(args, "ways", None) is not None:
        cfg["task.ways"] = args.ways
    if getattr(args, "episodes", None) is not None:
        cfg["eval.episodes"] = args.episodes
    if getattr(args, "noise", None):
        cfg["eval.noise"] = [float(v) for v in args.noise.split(",") if v.strip()]
    if getattr(args, "method", None) is not None:
        cfg["train.method"] = args.method
    return cfg


def _outdir(cfg) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_pretrain(cfg: dict) -> int:
    out = _outdir(cfg)
    dataset = generate_dataset(cfgmod.dataset_spec(cfg))
    extractor, losses = nets.pretrain_extractor(
        dataset,
        epochs=cfg["pretrain.epochs"], batch_size=cfg["pretrain.batch_size"],
        lr=cfg["pretrain.lr"], momentum=cfg["pretrain.momentum"],
        weight_decay=cfg["pretrain.weight_decay"],
        decay_at=tuple(cfg["pretrain.decay_at"]), decay_factor=cfg["pretrain.decay_factor"],
        hidden=tuple(cfg["model.feat_hidden"]), d_feat=cfg["model.d_feat"],
        seed=cfg["seed"],
    )
    nets.save_net(out / "extractor.ckpt", extractor)
    with open(out / "pretrain_loss.csv", "w") as fh:
        fh.write(_stamp(cfg) + "\nepoch,loss\n")
        for i, l in enumerate(losses):
            fh.write(f"{i},{l!r}\n")
    _write_manifest(out, "pretrain", cfg, ["extractor.ckpt", "pretrain_loss.csv"])
    print(f"pretrained extractor -> {out / 'extractor.ckpt'}")
    return 0


def cmd_metatrain(cfg: dict, extractor_path: str | None) -> int:
    out = _outdir(cfg)
    path = Path(extractor_path) if extractor_path else out / "extractor.ckpt"
    if not path.exists():
        raise ConfigError(f"extractor checkpoint not found: {path}")
    extractor = nets.load_extractor(path)
    dataset = generate_dataset(cfgmod.dataset_spec(cfg))
    hyper = nets.HyperNetwork(extractor.d_feat, hidden=tuple(cfg["model.hyper_hidden"]),
                              rng=rng_stream(cfg["seed"], STREAM_TRAIN, 0))
    result = metatrain(extractor, hyper, dataset, cfgmod.train_config(cfg),
                       cfgmod.mix_config(cfg))
    nets.save_net(out / "extractor-tuned.ckpt", extractor)
    nets.save_net(out / "hyper.ckpt", hyper)
    with open(out / "train_loss.csv", "w") as fh:
        fh.write(_stamp(cfg) + "\nepoch,loss\n")
        for i, l in enumerate(result.epoch_losses):
            fh.write(f"{i},{l!r}\n")
    _write_manifest(out, "metatrain", cfg,
                    ["extractor-tuned.ckpt", "hyper.ckpt", "train_loss.csv"])
    print(f"meta-trained method={cfg['train.method']!r} -> {out / 'hyper.ckpt'}")
    return 0


def _write_records_csv(path, cfg, records):
    with open(path, "w") as fh:
        fh.write(_stamp(cfg) + "\nepisode,query,method,score,pred,truth\n")
        for ep, r in records:
            fh.write(f"{ep},{r.query_id},{r.method},{r.score!r},{r.predicted_class},{r.truth}\n")


def _roc_points(records, method):
    ind = np.array([r.score for _, r in records if r.method == method and r.truth != OOD_TRUTH])
    ood = np.array([r.score for _, r in records if r.method == method and r.truth == OOD_TRUTH])
    pts = [(0.0, 0.0)]
    for tau in np.unique(np.concatenate([ind, ood]))[::-1]:
        pts.append((float(np.mean(ood >= tau)), float(np.mean(ind >= tau))))
    pts.append((1.0, 1.0))
    return pts


def cmd_eval(cfg: dict, extractor_path: str | None, hyper_path: str | None) -> int:
    out = _outdir(cfg)
    methods = cfg["eval.methods"]
    if not methods:
        raise ConfigError("empty method list")
    for m in methods:
        if m not in SCORE_METHODS:
            raise ConfigError(f"unknown scoring method {m!r}; valid: {', '.join(SCORE_METHODS)}")

    spec = cfgmod.dataset_spec(cfg)
    split_sizes = {"base": spec.n_base, "val": spec.n_val, "novel": spec.n_novel}
    if cfg["task.ways"] > split_sizes[cfg["eval.split"]]:
        raise ConfigError(f"{cfg['task.ways']}-way exceeds the {cfg['eval.split']} "
                          f"split's {split_sizes[cfg['eval.split']]} classes")
    if cfg["task.shots"] > spec.samples_per_class:
        raise ConfigError(f"{cfg['task.shots']}-shot exceeds {spec.samples_per_class} samples per class")

    ex_path = Path(extractor_path) if extractor_path else None
    if ex_path is None:
        ex_path = out / "extractor-tuned.ckpt"
        if not ex_path.exists():
            ex_path = out / "extractor.ckpt"
    if not ex_path.exists():
        raise ConfigError(f"extractor checkpoint not found: {ex_path}")
    extractor = nets.load_extractor(ex_path)

    hy_path = Path(hyper_path) if hyper_path else out / "hyper.ckpt"
    hyper = nets.load_hypernetwork(hy_path) if hy_path.exists() else None

    dataset = generate_dataset(spec)
    odin_t = None if cfg["eval.odin_t"] < 0 else cfg["eval.odin_t"]
    ood_mode = None if cfg["eval.ood_mode"] == "standard" else cfg["eval.ood_mode"]
    noise_levels = cfg["eval.noise"] or [0.0]

    all_reports, outputs = [], []
    curves = {m: {"noise": [], "acc": [], "auroc": [], "fpr90": []} for m in methods}
    for nf in noise_levels:
        reports, records = evaluate(
            extractor, hyper, dataset, methods,
            n_episodes=cfg["eval.episodes"], n_way=cfg["task.ways"], k_shot=cfg["task.shots"],
            q_ind=cfg["eval.q_ind"], q_ood=cfg["eval.q_ood"], noise_frac=nf,
            seed=cfg["seed"], split=cfg["eval.split"], odin_t=odin_t,
            odin_eps=cfg["eval.odin_eps"], ood_mix_mode=ood_mode,
            ood_mix_beta=(cfg["mix.a_om"], cfg["mix.b_om"]),
            config_snapshot={"noise_frac": nf, "config_hash": cfgmod.config_hash(cfg),
                             "ways": cfg["task.ways"], "shots": cfg["task.shots"],
                             "split": cfg["eval.split"],
                             "ci": "mean +- 1.96*std(ddof=1)/sqrt(n_episodes)"},
        )
        all_reports.extend(reports)
        suffix = "" if len(noise_levels) == 1 else f"-noise{nf:g}"
        rec_name = f"records{suffix}.csv"
        _write_records_csv(out / rec_name, cfg, records)
        outputs.append(rec_name)
        for r in reports:
            curves[r.method]["noise"].append(nf)
            curves[r.method]["acc"].append(r.ind_acc.mean)
            curves[r.method]["auroc"].append(r.auroc.mean)
            curves[r.method]["fpr90"].append(r.fpr90.mean)
        if nf == noise_levels[0]:
            roc_series = []
            for m in methods:
                pts = _roc_points(records, m)
                with open(out / f"roc-{m}.csv", "w") as fh:
                    fh.write(_stamp(cfg) + "\nmethod,fpr,tpr\n")
                    for fpr, tpr in pts:
                        fh.write(f"{m},{fpr!r},{tpr!r}\n")
                outputs.append(f"roc-{m}.csv")
                roc_series.append((m, [p[0] for p in pts], [p[1] for p in pts]))
            plots.write_line_chart(out / "roc.svg", roc_series,
                                   "ROC by scoring method", "false positive rate",
                                   "true positive rate")
            outputs.append("roc.svg")

    _write_json(out / "reports.json", [r.to_dict() for r in all_reports])
    outputs.append("reports.json")

    if len(noise_levels) > 1:
        with open(out / "noise_curves.csv", "w") as fh:
            fh.write(_stamp(cfg) + "\nnoise,method,ind_acc,auroc,fpr90\n")
            for m in methods:
                c = curves[m]
                for i, nf in enumerate(c["noise"]):
                    fh.write(f"{nf:g},{m},{c['acc'][i]!r},{c['auroc'][i]!r},{c['fpr90'][i]!r}\n")
        plots.write_line_chart(out / "noise_acc.svg",
                               [(m, curves[m]["noise"], curves[m]["acc"]) for m in methods],
                               "IND accuracy vs support noise", "noise fraction", "IND accuracy")
        plots.write_line_chart(out / "noise_auroc.svg",
                               [(m, curves[m]["noise"], curves[m]["auroc"]) for m in methods],
                               "AUROC vs support noise", "noise fraction", "AUROC")
        outputs += ["noise_curves.csv", "noise_acc.svg", "noise_auroc.svg"]

    _write_manifest(out, "eval", cfg, outputs)
    for r in all_reports:
        nf = r.config.get("noise_frac", 0.0)
        print(f"{r.method:9s} noise={nf:g} acc={r.ind_acc.mean:.4f}+-{r.ind_acc.half_width:.4f} "
              f"auroc={r.auroc.mean:.4f}+-{r.auroc.half_width:.4f} "
              f"fpr90={r.fpr90.mean:.4f}+-{r.fpr90.half_width:.4f}")
    return 0


def derive_cell_seed(base_seed: int, idx: int) -> int:
    """Per-cell seed: base seed plus grid index. Offsets are enough because
    different seeds already select independent Philox streams, and cell 0
    reproduces a manual single run exactly."""
    return int(base_seed) + int(idx)


def parse_grid(grid: str) -> list[tuple[str, list]]:
    """Grid syntax: "key=v1,v2;key2=v3,v4". Keys must be scalar config keys."""
    axes = []
    for part in grid.split(";"):
        part = part.strip()
        if not part:
            continue
        if "=" not in part:
            raise ConfigError(f"bad grid axis {part!r}; expected key=v1,v2,...")
        key, raw = (p.strip() for p in part.split("=", 1))
        if key not in cfgmod.SCHEMA:
            raise ConfigError(f"unknown config key {key!r} in grid")
        if isinstance(cfgmod.SCHEMA[key][0], list):
            raise ConfigError(f"cannot sweep list-valued key {key!r}")
        values = [cfgmod.parse_value(key, v) for v in raw.split(",") if v.strip()]
        if not values:
            raise ConfigError(f"grid axis {key!r} has no values")
        axes.append((key, values))
    if not axes:
        raise ConfigError("empty sweep grid")
    return axes


def _sweep_cell(payload):
    """One grid cell: full pipeline on the validation split. Top-level so a
    process pool can pickle it."""
    cfg, idx, overrides = payload
    cfg = dict(cfg)
    cfg.update(overrides)
    cfg["seed"] = derive_cell_seed(cfg["seed"], idx)
    cell_out = Path(cfg["out"]) / f"cell-{idx:03d}"
    cell_out.mkdir(parents=True, exist_ok=True)

    dataset = generate_dataset(cfgmod.dataset_spec(cfg))
    extractor, _ = nets.pretrain_extractor(
        dataset, epochs=cfg["pretrain.epochs"], batch_size=cfg["pretrain.batch_size"],
        lr=cfg["pretrain.lr"], momentum=cfg["pretrain.momentum"],
        weight_decay=cfg["pretrain.weight_decay"], decay_at=tuple(cfg["pretrain.decay_at"]),
        decay_factor=cfg["pretrain.decay_factor"], hidden=tuple(cfg["model.feat_hidden"]),
        d_feat=cfg["model.d_feat"], seed=cfg["seed"])
    hyper = nets.HyperNetwork(extractor.d_feat, hidden=tuple(cfg["model.hyper_hidden"]),
                              rng=rng_stream(cfg["seed"], STREAM_TRAIN, 0))
    metatrain(extractor, hyper, dataset, cfgmod.train_config(cfg), cfgmod.mix_config(cfg))
    method = cfg["eval.methods"][0] if cfg["eval.methods"] else "msp"
    reports, _ = evaluate(
        extractor, hyper, dataset, [method], n_episodes=cfg["eval.episodes"],
        n_way=cfg["task.ways"], k_shot=cfg["task.shots"], q_ind=cfg["eval.q_ind"],
        q_ood=cfg["eval.q_ood"], seed=cfg["seed"], split="val",
        odin_t=None if cfg["eval.odin_t"] < 0 else cfg["eval.odin_t"],
        odin_eps=cfg["eval.odin_eps"],
        config_snapshot={"cell": idx, "config_hash": cfgmod.config_hash(cfg)})
    _write_json(cell_out / "reports.json", [r.to_dict() for r in reports])
    r = reports[0]
    return {"cell": idx, "seed": cfg["seed"], **overrides,
            "ind_acc": r.ind_acc.mean, "auroc": r.auroc.mean, "fpr90": r.fpr90.mean}


def cmd_sweep(cfg: dict, grid: str) -> int:
    out = _outdir(cfg)
    axes = parse_grid(grid)
    cells = list(product(*(vals for _, vals in axes)))
    if len(cells) > cfg["sweep.budget"]:
        raise ConfigError(f"grid has {len(cells)} runs, over the budget of "
                          f"{cfg['sweep.budget']} (raise sweep.budget to allow)")
    keys = [k for k, _ in axes]
    payloads = [(cfg, i, dict(zip(keys, cell))) for i, cell in enumerate(cells)]

    env_threads = os.environ.get("HYPERMIX_THREADS", "")
    threads = int(env_threads) if env_threads else min(4, os.cpu_count() or 1)
    threads = max(1, min(threads, len(payloads)))
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(_sweep_cell, payloads))
    else:
        rows = [_sweep_cell(p) for p in payloads]

    rows.sort(key=lambda r: (-r["auroc"], r["cell"]))
    with open(out / "sweep.csv", "w") as fh:
        fh.write(_stamp(cfg) + "\n")
        fh.write("cell,seed," + ",".join(keys) + ",ind_acc,auroc,fpr90\n")
        for r in rows:
            vals = ",".join(repr(r[k]) if isinstance(r[k], float) else str(r[k]) for k in keys)
            fh.write(f"{r['cell']},{r['seed']},{vals},{r['ind_acc']!r},{r['auroc']!r},{r['fpr90']!r}\n")
    _write_manifest(out, "sweep", cfg, ["sweep.csv"])
    print(f"sweep of {len(cells)} runs -> {out / 'sweep.csv'} (best auroc {rows[0]['auroc']:.4f})")
    return 0


def cmd_diagnose_cov(cfg: dict, extractor_path: str | None) -> int:
    out = _outdir(cfg)
    shots = cfg["diag.shots"]
    spec = cfgmod.dataset_spec(cfg)
    # the diagnostic needs K samples per class; regenerate with enough
    if max(shots) > spec.samples_per_class:
        spec = dataclasses.replace(spec, samples_per_class=max(shots))
    dataset = generate_dataset(spec)
    ex_path = Path(extractor_path) if extractor_path else None
    if ex_path is None:
        ex_path = out / "extractor-tuned.ckpt"
        if not ex_path.exists():
            ex_path = out / "extractor.ckpt"
    if not ex_path.exists():
        raise ConfigError(f"extractor checkpoint not found: {ex_path}")
    extractor = nets.load_extractor(ex_path)

    spectra = covariance_rank_diagnostic(extractor, dataset, shots, n_way=cfg["task.ways"],
                                         seed=cfg["seed"])
    with open(out / "cov_spectra.csv", "w") as fh:
        fh.write(_stamp(cfg) + "\nshots,index,singular_value\n")
        for k, sv in spectra:
            for i, v in enumerate(sv):
                fh.write(f"{k},{i},{v!r}\n")
    floor = 1e-18  # display floor for the log plot only
    plots.write_line_chart(
        out / "cov_spectra.svg",
        [(f"{k}-shot", list(range(len(sv))), list(np.log10(np.maximum(sv, floor))))
         for k, sv in spectra],
        "Pooled covariance spectrum by shot count", "singular value index",
        "log10 singular value")
    _write_manifest(out, "diagnose-cov", cfg, ["cov_spectra.csv", "cov_spectra.svg"])
    for k, sv in spectra:
        n_zero = int(np.sum(sv < 1e-10))
        print(f"{k}-shot: {len(sv)} singular values, {n_zero} below 1e-10")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hypermix",
        description="Few-shot OOD detection experiments on synthetic data")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, methods=False):
        p.add_argument("--config", metavar="PATH", help="flat key=value config file")
        p.add_argument("--seed", type=int, metavar="U64")
        p.add_argument("--out", metavar="DIR")
        p.add_argument("--shots", type=int, metavar="K")
        p.add_argument("--ways", type=int, metavar="N")
        if methods:
            p.add_argument("--methods", metavar="LIST",
                           help="comma-separated scoring methods: " + ",".join(SCORE_METHODS))
            p.add_argument("--episodes", type=int, metavar="M")
            p.add_argument("--noise", metavar="LIST", help="comma-separated noise fractions")

    p = sub.add_parser("pretrain", help="pretrain the feature extractor on base classes")
    common(p)

    p = sub.add_parser("metatrain", help="episodic meta-training of the hypernetwork")
    common(p)
    p.add_argument("--method", help="training method token (plain, parammix, ooemix, "
                                    "hypermix, oe, oec)")
    p.add_argument("--extractor", metavar="CKPT")

    p = sub.add_parser("eval", help="meta-test evaluation of scoring methods")
    common(p, methods=True)
    p.add_argument("--extractor", metavar="CKPT")
    p.add_argument("--hyper", metavar="CKPT")

    p = sub.add_parser("sweep", help="hyperparameter grid sweep on the validation split")
    common(p, methods=True)
    p.add_argument("--grid", required=True, metavar="SPEC",
                   help='e.g. "mix.a_pm=0.1,1.0,2.0;mix.b_pm=5.0,10.0,20.0"')

    p = sub.add_parser("diagnose-cov", help="pooled covariance singular-value spectra by shots")
    common(p)
    p.add_argument("--extractor", metavar="CKPT")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _load_cfg(args)
        if args.command == "pretrain":
            return cmd_pretrain(cfg)
        if args.command == "metatrain":
            return cmd_metatrain(cfg, args.extractor)
        if args.command == "eval":
            return cmd_eval(cfg, args.extractor, args.hyper)
        if args.command == "sweep":
            return cmd_sweep(cfg, args.grid)
        if args.command == "diagnose-cov":
            return cmd_diagnose_cov(cfg, args.extractor)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime/numeric failures
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
