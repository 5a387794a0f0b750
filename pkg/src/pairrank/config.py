"""Run configuration: sectioned key=value files, presets, validation.

The on-disk grammar is the INI subset understood by ``configparser``:
``[section]`` headers followed by ``key = value`` lines; ``#`` comments.
Every key is validated against the schema below; unknown sections or keys
are rejected.

Environment variables prefixed ``PAIRRANK_`` override both the preset and any
config file: ``PAIRRANK_<SECTION>_<KEY>=value`` (e.g.
``PAIRRANK_RANK_EPOCHS=20``, ``PAIRRANK_SPLIT_REGIME=ag``). They pass through
the same schema validation as file values.
"""

from __future__ import annotations

import configparser
import hashlib
import io
import os

from .listsample import SamplerConfig
from .pretrain import ContrastiveConfig, PretrainConfig
from .ranker import RankConfig
from .synthdata import SynthConfig


def _bool(v):
    if v.lower() in ("1", "true", "yes", "on"):
        return True
    if v.lower() in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _choice(*opts):
    def parse(v):
        if v not in opts:
            raise ValueError(f"expected one of {opts}, got {v!r}")
        return v
    return parse


def _ranged(kind, lo=None, hi=None):
    def parse(v):
        x = kind(v)
        if lo is not None and x < lo:
            raise ValueError(f"value {x} below minimum {lo}")
        if hi is not None and x > hi:
            raise ValueError(f"value {x} above maximum {hi}")
        return x
    return parse


SCHEMA = {
    "synth": {
        "n_families": _ranged(int, 1),
        "antigens_per_family": _ranged(int, 1),
        "antibodies_per_antigen": _ranged(int, 1),
        "mutation_rate": _ranged(float, 0.0, 1.0),
        "ab_len_min": _ranged(int, 2),
        "ab_len_max": _ranged(int, 2),
        "ag_len_min": _ranged(int, 2),
        "ag_len_max": _ranged(int, 2),
        "labeled_fraction": _ranged(float, 1e-9, 1.0),
        "label_noise": _ranged(float, 0.0),
        "epitope_len": _ranged(int, 1),
    },
    "pretrain": {
        "optimizer": _choice("sgd"),
        "epochs": _ranged(int, 1),
        "warmup_epochs": _ranged(int, 0),
        "batch_size": _ranged(int, 2),
        "lr": _ranged(float, 1e-12),
        "meta_lr": _ranged(float, 1e-12),
        "meta_steps": _ranged(int, 1),
        "virtual_lr": _ranged(float, 0.0),
        "weight_decay": _ranged(float, 0.0),
        "momentum": _ranged(float, 0.0, 1.0),
        "temperature": _ranged(float, 1e-9),
        "rho_low": _ranged(float, 0.0, 1.0),
        "rho_high": _ranged(float, 0.0, 1.0),
        "knn_k": _ranged(int, 1),
        "n_prototypes": _ranged(int, 1),
        "ema_momentum": _ranged(float, 0.0, 1.0),
        "val_fraction": _ranged(float, 0.0, 1.0),
        "meta_batch_cap": _ranged(int, 2),
        "use_confidence_filter": _bool,
    },
    "rank": {
        "optimizer": _choice("adam"),
        "epochs": _ranged(int, 1),
        "batch_size": _ranged(int, 1),
        "lr": _ranged(float, 1e-12),
        "weight_decay": _ranged(float, 0.0),
        "inducing_points": _ranged(int, 1),
        "heads": _ranged(int, 1),
        "dropout": _ranged(float, 0.0, 0.999),
        "d_rank": _ranged(int, 4),
        "n_layers": _ranged(int, 1),
    },
    "sample": {
        "delta_seq": _ranged(float, 0.0, 1.0),
        "k": _ranged(int, 2),
        "n_train_lists": _ranged(int, 1),
        "n_test_lists": _ranged(int, 1),
    },
    "split": {
        "regime": _choice("random", "ag", "ab"),
        "fold": _ranged(int, 0),
        "n_folds": _ranged(int, 2),
        "n_clusters": _ranged(int, 2),
    },
}

# Table-default training values; the desk preset shrinks sizes for CPU runs.
PRESETS = {
    "paper-default": {
        "synth": dict(n_families=8, antigens_per_family=8,
                      antibodies_per_antigen=40, mutation_rate=0.02,
                      ab_len_min=20, ab_len_max=60, ag_len_min=40,
                      ag_len_max=120, labeled_fraction=0.2, label_noise=0.3,
                      epitope_len=10),
        "pretrain": dict(optimizer="sgd", epochs=400, warmup_epochs=20,
                         batch_size=64, lr=0.001, meta_lr=0.001, meta_steps=1,
                         virtual_lr=0.1, weight_decay=1e-4, momentum=0.9,
                         temperature=0.07, rho_low=0.8, rho_high=0.95,
                         knn_k=5, n_prototypes=3, ema_momentum=0.9,
                         val_fraction=0.1, meta_batch_cap=16,
                         use_confidence_filter=True),
        "rank": dict(optimizer="adam", epochs=50, batch_size=16, lr=0.001,
                     weight_decay=0.3, inducing_points=5, heads=4,
                     dropout=0.2, d_rank=64, n_layers=2),
        "sample": dict(delta_seq=0.9, k=5, n_train_lists=400,
                       n_test_lists=200),
        "split": dict(regime="random", fold=0, n_folds=5, n_clusters=6),
    },
    "desk-small": {
        "synth": dict(n_families=6, antigens_per_family=5,
                      antibodies_per_antigen=20, mutation_rate=0.02,
                      ab_len_min=20, ab_len_max=40, ag_len_min=40,
                      ag_len_max=70, labeled_fraction=0.2, label_noise=0.3,
                      epitope_len=10),
        "pretrain": dict(optimizer="sgd", epochs=40, warmup_epochs=20,
                         batch_size=64, lr=0.001, meta_lr=0.001, meta_steps=1,
                         virtual_lr=0.1, weight_decay=1e-4, momentum=0.9,
                         temperature=0.07, rho_low=0.8, rho_high=0.95,
                         knn_k=5, n_prototypes=3, ema_momentum=0.9,
                         val_fraction=0.1, meta_batch_cap=16,
                         use_confidence_filter=True),
        "rank": dict(optimizer="adam", epochs=10, batch_size=16, lr=0.001,
                     weight_decay=0.0, inducing_points=5, heads=4,
                     dropout=0.2, d_rank=64, n_layers=2),
        "sample": dict(delta_seq=0.9, k=5, n_train_lists=200,
                       n_test_lists=100),
        "split": dict(regime="random", fold=0, n_folds=5, n_clusters=6),
    },
}


class ConfigError(ValueError):
    pass


class RunConfig:
    """Validated, typed view of one run's settings."""

    def __init__(self, values):
        self.values = values  # {section: {key: typed value}}

    @classmethod
    def from_preset(cls, preset="desk-small", overrides_path=None):
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}")
        values = {s: dict(kv) for s, kv in PRESETS[preset].items()}
        if overrides_path is not None:
            file_vals = _parse_file(overrides_path)
            for section, kv in file_vals.items():
                values[section].update(kv)
        for section, kv in _parse_env(os.environ).items():
            values[section].update(kv)
        cfg = cls(values)
        cfg._check_consistency()
        return cfg

    def _check_consistency(self):
        s = self.values["synth"]
        if s["ab_len_min"] > s["ab_len_max"] or s["ag_len_min"] > s["ag_len_max"]:
            raise ConfigError("length ranges must satisfy min <= max")
        p = self.values["pretrain"]
        if p["rho_low"] > p["rho_high"]:
            raise ConfigError("rho_low must not exceed rho_high")
        r = self.values["rank"]
        if r["d_rank"] % r["heads"]:
            raise ConfigError("d_rank must be divisible by heads")

    def canonical_text(self):
        buf = io.StringIO()
        for section in sorted(self.values):
            buf.write(f"[{section}]\n")
            for key in sorted(self.values[section]):
                buf.write(f"{key} = {self.values[section][key]}\n")
        return buf.getvalue()

    def digest(self):
        return hashlib.sha256(self.canonical_text().encode()).digest()

    # typed config objects for the library layer -------------------------

    def synth_config(self, seed):
        s = self.values["synth"]
        return SynthConfig(
            n_families=s["n_families"],
            antigens_per_family=s["antigens_per_family"],
            antibodies_per_antigen=s["antibodies_per_antigen"],
            mutation_rate=s["mutation_rate"],
            ab_len_range=(s["ab_len_min"], s["ab_len_max"]),
            ag_len_range=(s["ag_len_min"], s["ag_len_max"]),
            labeled_fraction=s["labeled_fraction"],
            label_noise=s["label_noise"],
            epitope_len=s["epitope_len"],
            seed=seed)

    def pretrain_config(self):
        p = self.values["pretrain"]
        return PretrainConfig(
            epochs=p["epochs"], batch_size=p["batch_size"], lr=p["lr"],
            meta_lr=p["meta_lr"], meta_steps=p["meta_steps"],
            virtual_lr=p["virtual_lr"], momentum=p["momentum"],
            weight_decay=p["weight_decay"], ema_momentum=p["ema_momentum"],
            val_fraction=p["val_fraction"], meta_batch_cap=p["meta_batch_cap"],
            contrastive=ContrastiveConfig(
                temperature=p["temperature"], knn_k=p["knn_k"],
                n_prototypes=p["n_prototypes"],
                warmup_epochs=p["warmup_epochs"],
                rho_range=(p["rho_low"], p["rho_high"]),
                use_confidence_filter=p["use_confidence_filter"]))

    def rank_config(self, variant="full"):
        r = self.values["rank"]
        return RankConfig(
            epochs=r["epochs"], batch_size=r["batch_size"], lr=r["lr"],
            weight_decay=r["weight_decay"], dropout=r["dropout"],
            d_rank=r["d_rank"], n_layers=r["n_layers"], n_heads=r["heads"],
            n_inducing=r["inducing_points"], variant=variant)

    def sampler_config(self, homologous_only=False):
        sm = self.values["sample"]
        regime = self.values["split"]["regime"]
        cfg = SamplerConfig.for_regime(regime, k=sm["k"])
        cfg.delta_seq = sm["delta_seq"]
        if homologous_only:
            cfg.homologous_ratio = 1.0
        return cfg


def _parse_file(path):
    parser = configparser.ConfigParser()
    with open(path) as fh:
        parser.read_file(fh)
    values = {}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        values[section] = {}
        for key, raw in parser.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            try:
                values[section][key] = SCHEMA[section][key](raw)
            except ValueError as exc:
                raise ConfigError(f"[{section}] {key}: {exc}") from exc
    return values


ENV_PREFIX = "PAIRRANK_"


def _parse_env(environ):
    """Overrides from ``PAIRRANK_<SECTION>_<KEY>`` environment variables."""
    values = {}
    for name, raw in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        section, _, key = name[len(ENV_PREFIX):].lower().partition("_")
        if section not in SCHEMA:
            raise ConfigError(f"{name}: unknown section [{section}]")
        if key not in SCHEMA[section]:
            raise ConfigError(f"{name}: unknown key {key!r} in [{section}]")
        try:
            values.setdefault(section, {})[key] = SCHEMA[section][key](raw)
        except ValueError as exc:
            raise ConfigError(f"{name}: {exc}") from exc
    return values
