"""Flat key-value run configuration.

Grammar: one `key = value` pair per line, `#` starts a comment, keys are
dotted lowercase paths. Every key has a documented default below; unknown
keys are rejected. Lists are comma separated. The config hash is a sha256
over the canonical sorted `key=value` lines, so equal hashes mean equal
effective configuration.
"""

from __future__ import annotations

import hashlib

from .errors import ConfigError
from .mixing import MixConfig
from .metatrain import TrainConfig
from .synthdata import DatasetSpec


def _parse_bool(s: str) -> bool:
    if s.lower() in ("true", "1", "yes", "on"):
        return True
    if s.lower() in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_int_list(s: str):
    return [int(v) for v in s.split(",") if v.strip() != ""]


def _parse_float_list(s: str):
    return [float(v) for v in s.split(",") if v.strip() != ""]


def _parse_str_list(s: str):
    return [v.strip() for v in s.split(",") if v.strip() != ""]


# key -> (default, parser). -1 on the "auto" integers means derive at use.
SCHEMA: dict[str, tuple] = {
    "seed": (0, int),
    "out": ("runs", str),

    "data.input_dim": (16, int),
    "data.n_base": (64, int),
    "data.n_val": (16, int),
    "data.n_novel": (20, int),
    "data.samples_per_class": (60, int),
    "data.class_spread": (1.0, float),
    "data.center_scale": (3.5, float),

    "model.d_feat": (32, int),
    "model.feat_hidden": ([64, 64], _parse_int_list),
    "model.hyper_hidden": ([256, 256], _parse_int_list),

    "pretrain.epochs": (50, int),
    "pretrain.batch_size": (64, int),
    "pretrain.lr": (0.05, float),
    "pretrain.momentum": (0.9, float),
    "pretrain.weight_decay": (5e-4, float),
    "pretrain.decay_at": ([0.6, 0.8], _parse_float_list),
    "pretrain.decay_factor": (0.2, float),

    "task.ways": (5, int),
    "task.shots": (5, int),

    "train.method": ("plain", str),
    "train.epochs": (50, int),
    "train.batches_per_epoch": (50, int),
    "train.episodes_per_batch": (4, int),
    "train.q_ind": (10, int),
    "train.lr": (0.001, float),
    "train.momentum": (0.0, float),
    "train.weight_decay": (0.0, float),
    "train.finetune_extractor": (True, _parse_bool),

    "mix.a_pm": (2.0, float),
    "mix.b_pm": (5.0, float),
    "mix.a_om": (20.0, float),
    "mix.b_om": (20.0, float),
    "mix.n_param_mix": (-1, int),   # -1: match the support size
    "mix.n_ooe_mix": (-1, int),     # -1: match the IND query count
    "mix.beta_oe": (1.0, float),

    "eval.methods": (["msp"], _parse_str_list),
    "eval.episodes": (400, int),
    "eval.q_ind": (10, int),
    "eval.q_ood": (10, int),
    "eval.noise": ([], _parse_float_list),
    "eval.split": ("novel", str),
    "eval.odin_t": (-1.0, float),   # -1: pick by shot count
    "eval.odin_eps": (0.002, float),
    "eval.ood_mode": ("standard", str),  # standard | ine-ooe | ine-ine

    "sweep.budget": (64, int),
    "diag.shots": ([1, 5, 10, 100], _parse_int_list),
}


def default_config() -> dict:
    return {k: (list(v) if isinstance(v, list) else v) for k, (v, _) in SCHEMA.items()}


def parse_value(key: str, raw: str):
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key {key!r}")
    _, parser = SCHEMA[key]
    try:
        return parser(raw.strip())
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"bad value for {key}: {raw!r} ({exc})") from exc


def load_config(path: str | None) -> dict:
    cfg = default_config()
    if path is None:
        return cfg
    try:
        with open(path) as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for lineno, line in enumerate(lines, 1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {text!r}")
        key, raw = (part.strip() for part in text.split("=", 1))
        cfg[key] = parse_value(key, raw)
    return cfg


def canonical_lines(cfg: dict) -> list[str]:
    lines = []
    for key in sorted(cfg):
        v = cfg[key]
        if isinstance(v, list):
            rendered = ",".join(repr(x) if isinstance(x, float) else str(x) for x in v)
        elif isinstance(v, float):
            rendered = repr(v)
        else:
            rendered = str(v)
        lines.append(f"{key}={rendered}")
    return lines


def config_hash(cfg: dict) -> str:
    """Hash of the effective configuration; the output directory is not
    part of it, so runs into different directories compare equal."""
    effective = {k: v for k, v in cfg.items() if k != "out"}
    h = hashlib.sha256("\n".join(canonical_lines(effective)).encode())
    return h.hexdigest()[:16]


def dataset_spec(cfg: dict) -> DatasetSpec:
    return DatasetSpec(
        input_dim=cfg["data.input_dim"],
        n_base=cfg["data.n_base"],
        n_val=cfg["data.n_val"],
        n_novel=cfg["data.n_novel"],
        samples_per_class=cfg["data.samples_per_class"],
        class_spread=cfg["data.class_spread"],
        center_scale=cfg["data.center_scale"],
        seed=cfg["seed"],
    )


def train_config(cfg: dict, method: str | None = None) -> TrainConfig:
    return TrainConfig(
        method=method if method is not None else cfg["train.method"],
        epochs=cfg["train.epochs"],
        batches_per_epoch=cfg["train.batches_per_epoch"],
        episodes_per_batch=cfg["train.episodes_per_batch"],
        n_way=cfg["task.ways"],
        k_shot=cfg["task.shots"],
        q_ind=cfg["train.q_ind"],
        lr=cfg["train.lr"],
        momentum=cfg["train.momentum"],
        weight_decay=cfg["train.weight_decay"],
        finetune_extractor=cfg["train.finetune_extractor"],
        seed=cfg["seed"],
    )


def mix_config(cfg: dict) -> MixConfig:
    return MixConfig(
        a_pm=cfg["mix.a_pm"], b_pm=cfg["mix.b_pm"],
        a_om=cfg["mix.a_om"], b_om=cfg["mix.b_om"],
        n_param_mix=None if cfg["mix.n_param_mix"] < 0 else cfg["mix.n_param_mix"],
        n_ooe_mix=None if cfg["mix.n_ooe_mix"] < 0 else cfg["mix.n_ooe_mix"],
        beta_oe=cfg["mix.beta_oe"],
    )
