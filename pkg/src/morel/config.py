"""Flat dotted-key run configuration stored as INI ([train] lr = ... -> train.lr).

Defaults are the full-scale CIFAR-10 recipe; presets are merged before
file values and --set overrides. Unknown keys are rejected.
"""

import configparser
import io
from fractions import Fraction
from typing import Dict, Iterable, Optional

import numpy as np

from .attacks import AttackSpec, cw_spec, fgsm_spec, pgd_spec
from .data import LabeledImages, load_dataset
from .losses import LossParams
from .scalarization import ScalarizationParams
from .training import TrainConfig

_ATTACK_DEFAULTS = {
    "family": "pgd", "epsilon": 8 / 255, "step_size": 2 / 255, "iterations": 10, "random_start": True,
    "inner_loss": "ce", "confidence": 1.0, "c_const": 15.0, "lr": 1e-2,
}

DEFAULTS: Dict[str, object] = {
    "run.method": "morel-t",
    "run.seed": 0,
    "run.out": "runs/default",
    "run.device": "cpu",
    "data.name": "cifar10",
    "data.root": "data",
    "data.train_size": 0,
    "data.test_size": 0,
    "data.val": "test",
    "data.holdout_fraction": 0.1,
    "data.synthetic_classes": 10,
    "data.synthetic_per_class": 16,
    "data.synthetic_test_per_class": 8,
    "data.synthetic_size": 16,
    "data.synthetic_signal": 0.12,
    "data.synthetic_noise": 0.08,
    "model.arch": "small_cnn",
    "model.width": 32,
    "model.feature_dim": 128,
    "model.batch_norm": False,
    "train.epochs": 100,
    "train.batch_size": 8,
    "train.lr": 0.01,
    "train.momentum": 0.9,
    "train.weight_decay": 1e-4,
    "train.lr_milestones": (75, 90),
    "train.lr_factor": 0.01,
    "train.augment": True,
    "train.attack_bn_train": True,
    "train.eval_subsample": 0,
    "train.eval_batch_size": 256,
    **{f"attack.{k}": v for k, v in _ATTACK_DEFAULTS.items()},
    **{f"eval_attack.{k}": v for k, v in _ATTACK_DEFAULTS.items()},
    "eval_attack.iterations": 20,
    "eval_attack.step_size": 0.8 / 255,
    "eval_attack.random_start": False,
    "loss.alpha": 1e-5,
    "loss.tau": 0.1,
    "loss.inv_lambda": 6.0,
    "loss.l2_variant": "trades",
    "loss.contrastive_inputs": "concat",
    "loss.kl_direction": "nat_adv",
    "scalarization.k1": 0.1,
    "scalarization.k2": 0.9,
    "scalarization.gamma": 2e-5,
    "scalarization.a1": 0.0,
    "scalarization.a2": 0.0,
    "scalarization.abs_mode": False,
    "embedding.embed_dim": 128,
    "embedding.heads": 2,
    "evaluate.suite": "fgsm,pgd20,pgd100,cw",
    "evaluate.epsilon": 8 / 255,
    "evaluate.batch_size": 256,
    "evaluate.chart": True,
}

PRESETS: Dict[str, Dict[str, object]] = {
    "morel-t": {"run.method": "morel-t", "attack.inner_loss": "kl", "loss.l2_variant": "trades"},
    "morel-m": {"run.method": "morel-m", "attack.inner_loss": "ce", "loss.l2_variant": "mart"},
    "trades": {"run.method": "trades", "attack.inner_loss": "kl", "loss.l2_variant": "trades"},
    "mart": {"run.method": "mart", "attack.inner_loss": "ce", "loss.l2_variant": "mart"},
    "natural": {"run.method": "natural"},
}


class ConfigError(ValueError):
    pass


def parse_value(key: str, raw, default):
    """Coerce `raw` to the type of `default`; strings accept fractions like 8/255."""
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if isinstance(default, bool):
            lowered = text.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(Fraction(text))
        if isinstance(default, tuple):
            return tuple(int(v) for v in text.replace("(", "").replace(")", "").split(",") if v.strip())
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"{key}: {exc}") from exc
    return text


def _check_key(key):
    if key not in DEFAULTS:
        raise ConfigError(f"unknown config key {key!r}")


def read_ini(text: str) -> Dict[str, str]:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    flat = {}
    for section in parser.sections():
        for key, value in parser.items(section):
            flat[f"{section}.{key}"] = value
    return flat


def resolve(preset: Optional[str] = None, file_text: Optional[str] = None,
            overrides: Iterable[str] = (), base: Optional[Dict[str, object]] = None) -> Dict[str, object]:
    """defaults (or `base`) <- preset <- config file <- key=value overrides."""
    file_values = read_ini(file_text) if file_text else {}
    preset = preset or file_values.pop("run.preset", None)
    file_values.pop("run.preset", None)
    cfg = dict(DEFAULTS)
    for key, value in (base or {}).items():
        _check_key(key)
        cfg[key] = tuple(value) if isinstance(DEFAULTS[key], tuple) else value
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; expected one of {sorted(PRESETS)}")
        cfg.update(PRESETS[preset])
    for key, raw in file_values.items():
        _check_key(key)
        cfg[key] = parse_value(key, raw, DEFAULTS[key])
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        key = key.strip()
        _check_key(key)
        cfg[key] = parse_value(key, raw, DEFAULTS[key])
    return cfg


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def to_ini(cfg: Dict[str, object]) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for key in DEFAULTS:
        section, name = key.split(".", 1)
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, name, _format(cfg[key]))
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def _attack(cfg, prefix) -> AttackSpec:
    return AttackSpec(**{k: cfg[f"{prefix}.{k}"] for k in _ATTACK_DEFAULTS})


def train_config(cfg) -> TrainConfig:
    try:
        model_kwargs = {"width": cfg["model.width"], "feature_dim": cfg["model.feature_dim"],
                        "batch_norm": cfg["model.batch_norm"]} if cfg["model.arch"] == "small_cnn" else {}
        return TrainConfig(
            method=cfg["run.method"],
            epochs=cfg["train.epochs"],
            batch_size=cfg["train.batch_size"],
            lr=cfg["train.lr"],
            momentum=cfg["train.momentum"],
            weight_decay=cfg["train.weight_decay"],
            lr_milestones=cfg["train.lr_milestones"],
            lr_factor=cfg["train.lr_factor"],
            train_attack=_attack(cfg, "attack"),
            eval_attack=_attack(cfg, "eval_attack"),
            loss=LossParams(**{k: cfg[f"loss.{k}"] for k in
                               ("alpha", "tau", "inv_lambda", "l2_variant", "contrastive_inputs", "kl_direction")}),
            scalarization=ScalarizationParams.from_dict(
                {k: cfg[f"scalarization.{k}"] for k in ("k1", "k2", "gamma", "a1", "a2", "abs_mode")}),
            embed_dim=cfg["embedding.embed_dim"],
            heads=cfg["embedding.heads"],
            arch=cfg["model.arch"],
            model_kwargs=model_kwargs,
            seed=cfg["run.seed"],
            augment=cfg["train.augment"],
            attack_bn_train=cfg["train.attack_bn_train"],
            eval_subsample=cfg["train.eval_subsample"],
            eval_batch_size=cfg["train.eval_batch_size"],
        )
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def suite(cfg):
    eps = cfg["evaluate.epsilon"]
    builders = {"fgsm": lambda: fgsm_spec(eps), "pgd20": lambda: pgd_spec(20, eps),
                "pgd100": lambda: pgd_spec(100, eps), "cw": lambda: cw_spec(eps)}
    names = [n.strip() for n in str(cfg["evaluate.suite"]).split(",") if n.strip()]
    out = []
    for name in names:
        if name in builders:
            out.append(builders[name]())
        elif name.startswith("pgd") and name[3:].isdigit():
            out.append(pgd_spec(int(name[3:]), eps))
        else:
            raise ConfigError(f"unknown attack {name!r} in evaluate.suite")
    if not out:
        raise ConfigError("evaluate.suite is empty")
    return out


def load_data(cfg):
    """(train, validation, test) datasets for this configuration."""
    name = cfg["data.name"]
    seed = cfg["run.seed"]
    try:
        if name == "synthetic":
            common = {"classes": cfg["data.synthetic_classes"], "seed": seed,
                      "shape": (3, cfg["data.synthetic_size"], cfg["data.synthetic_size"]),
                      "signal": cfg["data.synthetic_signal"], "noise": cfg["data.synthetic_noise"]}
            train = load_dataset("synthetic", "train", per_class=cfg["data.synthetic_per_class"], **common)
            test = load_dataset("synthetic", "test", per_class=cfg["data.synthetic_test_per_class"], **common)
        else:
            train = load_dataset(name, "train", cfg["data.root"])
            test = load_dataset(name, "test", cfg["data.root"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if cfg["data.train_size"]:
        train = train.subsample(cfg["data.train_size"], seed)
    if cfg["data.test_size"]:
        test = test.subsample(cfg["data.test_size"], seed + 1)
    if cfg["data.val"] == "test":
        val = test
    elif cfg["data.val"] == "holdout":
        train, val = split_holdout(train, cfg["data.holdout_fraction"], seed)
    else:
        raise ConfigError(f"data.val must be 'test' or 'holdout', got {cfg['data.val']!r}")
    return train, val, test


def split_holdout(data: LabeledImages, fraction: float, seed: int):
    order = np.random.default_rng([seed, 7]).permutation(len(data))
    k = max(1, int(round(fraction * len(data))))
    return data.subset(np.sort(order[k:])), data.subset(np.sort(order[:k]))
